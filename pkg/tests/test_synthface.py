import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from matplotlib.path import Path as Polygon
from sklearn.linear_model import LogisticRegression
from sklearn.model_selection import train_test_split

from congaze.datamodel import GazeDirection, ValidationError
from congaze.synthface import (IRIS_GAIN, MIN_SUBJECT_DISTANCE, SCLERA, SynthDatasetSpec, eye_centers,
                               generate_dataset, iris_centers, render_face, sample_appearances)

APP = sample_appearances(3, 7)
LUMA = np.array([0.299, 0.587, 0.114])


def measured_iris_offsets(sample):
    """Darkness-weighted centroid inside the inner 80% of each eye, relative to the outline centre."""
    h, w = sample.size
    Y, X = np.mgrid[0:h, 0:w] + 0.5
    luma = sample.image @ LUMA
    out = []
    for outline in (sample.landmarks.left_outline, sample.landmarks.right_outline):
        pts = np.asarray(outline)
        c = pts.mean(0)
        a, b = np.ptp(pts[:, 0]) / 2, np.ptp(pts[:, 1]) / 2
        inner = ((X - c[0]) / (0.8 * a)) ** 2 + ((Y - c[1]) / (0.8 * b)) ** 2 <= 1
        wgt = np.clip(SCLERA @ LUMA - luma, 0, None) * inner
        out.append(((wgt * X).sum() / wgt.sum() - c[0], (wgt * Y).sum() / wgt.sum() - c[1]))
    return np.array(out)


def dilated(outline, px=1.0):
    pts = np.asarray(outline)
    c = pts.mean(0)
    half = np.array([np.ptp(pts[:, 0]), np.ptp(pts[:, 1])]) / 2
    return Polygon(c + (pts - c) * (half + px) / half)


def test_centered_gaze_centres_iris():
    s = render_face(APP[0], GazeDirection(0, 0))
    np.testing.assert_allclose(iris_centers(APP[0], GazeDirection(0, 0)), eye_centers(APP[0]))
    np.testing.assert_allclose(measured_iris_offsets(s), 0, atol=0.05)


def test_mirrored_yaw():
    left = render_face(APP[0], GazeDirection(0, 0.3))
    right = render_face(APP[0], GazeDirection(0, -0.3))
    off_l = np.subtract(iris_centers(APP[0], left.gaze), eye_centers(APP[0]))
    off_r = np.subtract(iris_centers(APP[0], right.gaze), eye_centers(APP[0]))
    np.testing.assert_allclose(off_l, off_r * [-1, 1])
    m_l, m_r = measured_iris_offsets(left), measured_iris_offsets(right)
    np.testing.assert_allclose(m_l[:, 0], -m_r[:, 0], atol=0.1)
    np.testing.assert_allclose(m_l[:, 1], m_r[:, 1], atol=0.05)
    # only pixels inside the eyes differ
    Y, X = np.mgrid[0:64, 0:64] + 0.5
    pix = np.stack([X.ravel(), Y.ravel()], 1)
    in_eyes = np.zeros(64 * 64, bool)
    for outline in (left.landmarks.left_outline, left.landmarks.right_outline):
        in_eyes |= dilated(outline).contains_points(pix)
    diff = np.abs(left.image - right.image).max(2).ravel() > 0
    assert diff.any() and not (diff & ~in_eyes).any()


def test_iris_offset_matches_gain():
    # frozen oracle: yaw 0.1 -> +0.9 px, pitch 0.2 -> -1.8 px at 64x64
    s = render_face(APP[0], GazeDirection(0.2, 0.1))
    expected = np.array([IRIS_GAIN * 0.1, -IRIS_GAIN * 0.2])
    np.testing.assert_allclose(expected, [0.9, -1.8])
    for off in measured_iris_offsets(s):
        np.testing.assert_allclose(off, expected, atol=0.1)


def test_gain_scales_with_image_size():
    offs = np.subtract(iris_centers(APP[1], GazeDirection(0.2, 0.1), (128, 128)), eye_centers(APP[1], (128, 128)))
    np.testing.assert_allclose(offs, [[1.8, -3.6], [1.8, -3.6]], atol=1e-12)


def test_gaze_fields_and_range():
    g = GazeDirection(-0.4, 0.25)
    assert render_face(APP[0], g).gaze == g
    with pytest.raises(ValidationError):
        render_face(APP[0], GazeDirection(0.61, 0))
    with pytest.raises(ValidationError):
        render_face(APP[0], GazeDirection(0, -0.7))


def test_monotone_sweep():
    grid = np.linspace(-0.6, 0.6, 13)
    xs = [measured_iris_offsets(render_face(APP[2], GazeDirection(0, y)))[0, 0] for y in grid]
    ys = [measured_iris_offsets(render_face(APP[2], GazeDirection(p, 0)))[0, 1] for p in grid]
    assert np.all(np.diff(xs) > 0)
    assert np.all(np.diff(ys) < 0)


@settings(max_examples=25, deadline=None)
@given(st.sampled_from(APP), st.floats(-0.6, 0.6), st.floats(-0.6, 0.6),
       st.floats(-1.5, 1.5), st.floats(-1.5, 1.5))
def test_outlines_enclose_iris_pixels(app, p, y, jx, jy):
    # render twice with the iris far apart; the pixels that change are iris pixels
    s1 = render_face(app, GazeDirection(p, y), jitter=(jx, jy))
    s2 = render_face(app, GazeDirection(-p if abs(p) > 0.2 else 0.6, -y if abs(y) > 0.2 else 0.6),
                     jitter=(jx, jy))
    Y, X = np.mgrid[0:64, 0:64] + 0.5
    changed = np.abs(s1.image - s2.image).max(2) > 0
    pts = np.stack([X[changed], Y[changed]], 1)
    inside = np.zeros(len(pts), bool)
    for outline in (s1.landmarks.left_outline, s1.landmarks.right_outline):
        inside |= dilated(outline, 1.0).contains_points(pts)
    assert changed.any() and inside.all()


def test_dataset_determinism():
    spec = SynthDatasetSpec(n_subjects=4, images_per_subject=200, image_size=(64, 64), master_seed=7)
    a, b = generate_dataset(spec), generate_dataset(spec)
    assert len(a) == 800
    assert np.array_equal(a.images(), b.images())
    assert np.array_equal(a.gaze_array(), b.gaze_array())
    assert all(s.landmarks is not None and s.gaze is not None for s in a)


def test_two_subjects():
    ds = generate_dataset(SynthDatasetSpec(n_subjects=2, images_per_subject=5))
    assert {s.subject_index for s in ds} == {0, 1}


def test_appearances_distinct():
    apps = sample_appearances(12, 11)
    vecs = np.stack([a.vector() for a in apps])
    d = np.linalg.norm(vecs[:, None] - vecs[None], axis=2)
    assert d[np.triu_indices(12, 1)].min() >= MIN_SUBJECT_DISTANCE


def test_linear_probe_identifies_subjects(desk_dataset):
    x = desk_dataset.images().reshape(len(desk_dataset), -1)
    y = np.array([s.subject_index for s in desk_dataset])
    xtr, xte, ytr, yte = train_test_split(x, y, test_size=0.25, random_state=0, stratify=y)
    probe = LogisticRegression(max_iter=2000).fit(xtr, ytr)
    assert probe.score(xte, yte) > 0.9


@pytest.mark.parametrize("kw", [dict(n_subjects=1), dict(images_per_subject=1), dict(image_size=(16, 16)),
                                dict(gaze_range=0.9)])
def test_spec_validation(kw):
    with pytest.raises(ValidationError):
        SynthDatasetSpec(**kw)


def test_grid_sampling_covers_range():
    ds = generate_dataset(SynthDatasetSpec(n_subjects=2, images_per_subject=9, gaze_grid_or_random="grid"))
    g = ds.gaze_array()
    assert g.min() == pytest.approx(-0.5) and g.max() == pytest.approx(0.5)
