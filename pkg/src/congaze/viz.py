"""Static exports: t-SNE scatter of representations and Grad-CAM attention maps."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import torch  # noqa: E402
import torch.nn.functional as F  # noqa: E402
from sklearn.manifold import TSNE  # noqa: E402
from sklearn.metrics import silhouette_score  # noqa: E402

from .datamodel import FaceDataset, FaceSample, PeriocularBox, ValidationError  # noqa: E402
from .nets import Checkpoint, GazeModel, extract_features, to_tensor, valid_attention_layers  # noqa: E402


def _model(checkpoint) -> GazeModel:
    return checkpoint.model if isinstance(checkpoint, Checkpoint) else checkpoint


# --------------------------------------------------------------------------- t-SNE scatter

@dataclass
class EmbeddingPlotData:
    points: np.ndarray  # (N, 2)
    subject_indices: np.ndarray
    image_ids: list
    subject_ids: list
    method: str = "tsne"

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        self.subject_indices = np.asarray(self.subject_indices, dtype=int)
        if self.points.ndim != 2 or self.points.shape[1] != 2:
            raise ValidationError("points must be (N, 2)")
        if not (len(self.points) == len(self.subject_indices) == len(self.image_ids)):
            raise ValidationError("points, subject indices and image ids differ in length")
        if not np.all(np.isfinite(self.points)):
            raise ValidationError("non-finite embedding coordinates")

    def silhouette(self) -> float:
        """Subject-identity silhouette score of the 2D points."""
        if len(set(self.subject_indices.tolist())) < 2:
            raise ValidationError("silhouette needs at least two subjects")
        return float(silhouette_score(self.points, self.subject_indices))


def tsne_embed(features: np.ndarray, perplexity: float = 30.0, max_iter: int = 1000,
               seed: int = 0) -> np.ndarray:
    n = len(features)
    if n <= perplexity or n < 4:
        suggestion = max(1.0, (n - 1) / 3.0)
        raise ValidationError(f"{n} samples are too few for perplexity {perplexity}; "
                              f"try perplexity <= {suggestion:.1f}")
    tsne = TSNE(n_components=2, perplexity=perplexity, max_iter=max_iter, init="pca",
                random_state=seed, n_jobs=1)
    return tsne.fit_transform(np.asarray(features, dtype=np.float64))


def image_id(dataset: FaceDataset, s: FaceSample) -> str:
    return f"{dataset.subject_ids[s.subject_index]}_{s.image_index:05d}"


def export_embedding_scatter(checkpoint, dataset: FaceDataset, out_path, perplexity: float = 30.0,
                             max_iter: int = 1000, seed: int = 0, title: str = "") -> EmbeddingPlotData:
    """Write ``out_path`` (CSV: x, y, subject_id, image_id) and a PNG next to it."""
    model = _model(checkpoint)
    if tuple(dataset.image_size) != tuple(model.cfg.backbone.input_size):
        raise ValidationError(f"dataset images {dataset.image_size} do not match the checkpoint's "
                              f"input size {model.cfg.backbone.input_size}")
    feats = extract_features(model, dataset.images())
    pts = tsne_embed(feats, perplexity, max_iter, seed)
    data = EmbeddingPlotData(pts, [s.subject_index for s in dataset],
                             [image_id(dataset, s) for s in dataset], list(dataset.subject_ids))
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    with open(out_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "y", "subject_id", "image_id"])
        for (x, y), si, iid in zip(data.points, data.subject_indices, data.image_ids):
            w.writerow([repr(float(x)), repr(float(y)), dataset.subject_ids[si], iid])
    plot_embedding(data, out_path.with_suffix(".png"), title)
    return data


def plot_embedding(data: EmbeddingPlotData, path, title: str = "") -> Path:
    fig, ax = plt.subplots(figsize=(5, 5), dpi=100)
    cmap = plt.get_cmap("tab10" if len(data.subject_ids) <= 10 else "tab20")
    for i in sorted(set(data.subject_indices.tolist())):
        m = data.subject_indices == i
        ax.scatter(data.points[m, 0], data.points[m, 1], s=6, color=cmap(i % cmap.N),
                   label=data.subject_ids[i])
    ax.set_xticks([])
    ax.set_yticks([])
    if title:
        ax.set_title(title)
    if len(data.subject_ids) <= 20:
        ax.legend(markerscale=2, fontsize=7, loc="best")
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return Path(path)


# --------------------------------------------------------------------------- Grad-CAM

@dataclass
class AttentionMap:
    heat: np.ndarray  # (H, W) in [0, 1]
    layer_index: int
    image_id: str = ""

    def __post_init__(self):
        h = np.asarray(self.heat, dtype=np.float64)
        if h.ndim != 2 or not np.all(np.isfinite(h)) or h.min() < 0 or h.max() > 1 + 1e-12:
            raise ValidationError("attention heat must be a finite HxW map in [0, 1]")
        self.heat = h


def attention_map(checkpoint, image, layer_index: int, image_id: str = "") -> AttentionMap:
    """Grad-CAM of the representation norm at one conv layer (1-based index)."""
    model = _model(checkpoint)
    valid = valid_attention_layers(model.cfg.backbone)
    if layer_index not in valid:
        raise ValidationError(f"layer {layer_index} is not addressable; valid layers: {list(valid)}")
    arr = image.image if isinstance(image, FaceSample) else np.asarray(image, dtype=np.float32)
    x = to_tensor(arr).to(next(model.parameters()).dtype)
    model.check_images(x)
    conv = model.extractor.conv_layers()[layer_index - 1]
    store = {}

    def hook(_module, _inputs, output):
        output.retain_grad()
        store["act"] = output

    handle = conv.register_forward_hook(hook)
    was_training = model.training
    model.eval()
    try:
        with torch.enable_grad():
            h = model.features(x)
            target = torch.linalg.vector_norm(h[0])
            model.zero_grad(set_to_none=True)
            target.backward()
    finally:
        handle.remove()
        model.train(was_training)
        model.zero_grad(set_to_none=True)
    act, grad = store["act"].detach(), store["act"].grad
    if grad is None:
        grad = torch.zeros_like(act)
    weights = grad.mean(dim=(2, 3), keepdim=True)
    cam = F.relu((weights * act).sum(dim=1, keepdim=True))
    cam = F.interpolate(cam, size=tuple(x.shape[2:]), mode="bilinear", align_corners=False)[0, 0]
    cam = torch.nan_to_num(cam, nan=0.0).clamp_min(0).double().numpy()
    peak = cam.max()
    heat = cam / peak if peak > 0 else np.zeros_like(cam)
    return AttentionMap(heat, layer_index, image_id)


def region_heat(att: AttentionMap, boxes: Sequence[PeriocularBox]) -> tuple[float, float]:
    """Mean heat inside the union of boxes and outside it (pixel centres)."""
    h, w = att.heat.shape
    ys, xs = np.mgrid[0:h, 0:w] + 0.5
    inside = np.zeros((h, w), dtype=bool)
    for b in boxes:
        inside |= (xs >= b.x_min) & (xs <= b.x_max) & (ys >= b.y_min) & (ys <= b.y_max)
    if inside.all() or not inside.any():
        raise ValidationError("boxes must cover part, but not all, of the image")
    return float(att.heat[inside].mean()), float(att.heat[~inside].mean())


def save_attention(att: AttentionMap, image: np.ndarray, out_stem, raw_format: str = "npy") -> list:
    """PNG overlay plus the raw matrix as ``.npy`` or ``.csv``; returns written paths."""
    if raw_format not in ("npy", "csv"):
        raise ValidationError("raw_format must be 'npy' or 'csv'")
    out_stem = Path(out_stem)
    out_stem.parent.mkdir(parents=True, exist_ok=True)
    colored = plt.get_cmap("jet")(att.heat)[..., :3]
    overlay = np.clip(0.55 * np.asarray(image, dtype=np.float64) + 0.45 * colored, 0, 1)
    png = out_stem.with_name(out_stem.name + ".png")
    plt.imsave(png, overlay, metadata={"Software": None})
    raw = out_stem.with_name(out_stem.name + "." + raw_format)
    if raw_format == "npy":
        np.save(raw, att.heat)
    else:
        np.savetxt(raw, att.heat, delimiter=",", fmt="%.8g")
    return [png, raw]


def export_attention_maps(checkpoint, samples: Sequence[FaceSample], layers: Sequence[int], out_dir,
                          ids: Optional[Sequence[str]] = None, raw_format: str = "npy") -> list:
    out_dir = Path(out_dir)
    written = []
    for k, s in enumerate(samples):
        sid = ids[k] if ids else f"img{k:04d}"
        for layer in layers:
            att = attention_map(checkpoint, s, layer, sid)
            written += save_attention(att, s.image, out_dir / f"{sid}_layer{layer}", raw_format)
    return written
