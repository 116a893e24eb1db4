"""On-disk formats: blob datasets, checkpoints, region embeddings, fusion
parameters and separation statistics.

Floats are written with 17 significant digits so a float64 survives a
write/read cycle bit for bit. Writers go through :func:`atomic_write` so a
failed command never leaves a half-written file behind.
"""

import contextlib
import os
import tempfile
from dataclasses import dataclass

import numpy as np

from .errors import DimMismatch
from .identify import FusionConfig, MissingRegionPolicy, RegionEmbeddingStore, RegionParams
from .losses import CentroidMode, CentroidSet
from .trainer import Dataset, MlpModel, SoftmaxHead

CHECKPOINT_MAGIC = "COCO1"
UNLABELED = "?"


def fmt(x):
    return format(float(x), ".17g")


@contextlib.contextmanager
def atomic_write(path, mode="w"):
    """Write to a temp file beside ``path`` and rename into place on success."""
    path = os.fspath(path)
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, mode) as fh:
            yield fh
        os.replace(tmp, path)
    except BaseException:
        with contextlib.suppress(FileNotFoundError):
            os.unlink(tmp)
        raise


# -- datasets ---------------------------------------------------------------

def write_dataset(path, dataset):
    dim = dataset.inputs.shape[1]
    with atomic_write(path) as fh:
        fh.write("label," + ",".join(f"x{i + 1}" for i in range(dim)) + "\n")
        for lab, row in zip(dataset.labels, dataset.inputs):
            fh.write(f"{int(lab)}," + ",".join(fmt(v) for v in row) + "\n")


def read_dataset(path, num_classes=None):
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        if not header or header[0] != "label":
            raise ValueError(f"{path}: expected a 'label,x1,...' header")
        labels, rows = [], []
        for lineno, line in enumerate(fh, 2):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != len(header):
                raise ValueError(f"{path}:{lineno}: expected {len(header)} fields")
            labels.append(int(parts[0]))
            rows.append([float(v) for v in parts[1:]])
    if not rows:
        raise ValueError(f"{path}: no samples")
    labels = np.array(labels, dtype=np.int64)
    k = int(labels.max()) + 1 if num_classes is None else num_classes
    return Dataset(np.array(rows), labels, k)


def write_metadata(path, **params):
    with atomic_write(path) as fh:
        fh.write(" ".join(f"{k}={v}" for k, v in params.items()) + "\n")


# -- checkpoints --------------------------------------------------------------

@dataclass
class Checkpoint:
    model: MlpModel
    head: object  # CentroidSet or SoftmaxHead
    temperature: float = 1.0

    @property
    def loss(self):
        return "softmax" if isinstance(self.head, SoftmaxHead) else "coco"


def save_checkpoint(path, ckpt):
    """Text header line, then little-endian float64 blocks: each layer's
    weight (out x in, row-major) and bias, then the K x D head matrix, then
    (softmax head only) the K head biases."""
    model, head = ckpt.model, ckpt.head
    k, d = (head.weight.shape if isinstance(head, SoftmaxHead) else head.centroids.shape)
    mode = "none" if isinstance(head, SoftmaxHead) else head.mode.value
    header = (f"{CHECKPOINT_MAGIC} layer_dims={','.join(map(str, model.layer_dims))} "
              f"D={d} K={k} centroid_mode={mode} activation={model.activation} "
              f"loss={ckpt.loss} temperature={fmt(ckpt.temperature)}\n")
    blocks = model.params()
    blocks += [head.weight, head.bias] if isinstance(head, SoftmaxHead) else [head.centroids]
    with atomic_write(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        for b in blocks:
            fh.write(np.ascontiguousarray(b, dtype="<f8").tobytes())


def load_checkpoint(path):
    with open(path, "rb") as fh:
        header = fh.readline().decode("ascii").split()
        payload = fh.read()
    if not header or header[0] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a {CHECKPOINT_MAGIC} checkpoint")
    meta = dict(item.split("=", 1) for item in header[1:])
    dims = [int(x) for x in meta["layer_dims"].split(",")]
    d, k = int(meta["D"]), int(meta["K"])
    if dims[-1] != d:
        raise DimMismatch(f"{path}: output dim {dims[-1]} != D={d}")
    data = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    pos = 0

    def take(*shape):
        nonlocal pos
        n = int(np.prod(shape))
        if pos + n > data.size:
            raise ValueError(f"{path}: truncated parameter block")
        out = data[pos:pos + n].reshape(shape).copy()
        pos += n
        return out

    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        weights.append(take(fan_out, fan_in))
        biases.append(take(fan_out))
    model = MlpModel(dims, weights, biases, meta.get("activation", "relu"))
    if meta.get("loss", "coco") == "softmax":
        head = SoftmaxHead(take(k, d), take(k))
    else:
        head = CentroidSet(take(k, d), CentroidMode(meta["centroid_mode"]))
    if pos != data.size:
        raise ValueError(f"{path}: {data.size - pos} trailing values")
    return Checkpoint(model, head, float(meta.get("temperature", 1.0)))


# -- region embeddings ---------------------------------------------------------

@dataclass
class EmbeddingFile:
    region_id: int
    ids: list
    labels: list  # None for unlabeled records
    features: np.ndarray

    @property
    def dim(self):
        return self.features.shape[1]

    @property
    def labeled(self):
        return all(lab is not None for lab in self.labels)


def write_embeddings(path, region_id, ids, labels, features):
    features = np.asarray(features, dtype=np.float64)
    with atomic_write(path) as fh:
        fh.write(f"region {region_id} dim {features.shape[1]}\n")
        for i, lab, row in zip(ids, labels, features):
            lab = UNLABELED if lab is None else lab
            fh.write(f"{i},{lab}," + ",".join(fmt(v) for v in row) + "\n")


def read_embeddings(path):
    with open(path) as fh:
        head = fh.readline().split()
        if len(head) != 4 or head[0] != "region" or head[2] != "dim":
            raise ValueError(f"{path}: expected 'region <r> dim <D>' header")
        region, dim = int(head[1]), int(head[3])
        ids, labels, rows = [], [], []
        for lineno, line in enumerate(fh, 2):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != dim + 2:
                raise DimMismatch(f"{path}:{lineno}: expected {dim} features")
            ids.append(parts[0])
            labels.append(None if parts[1] == UNLABELED else parts[1])
            rows.append([float(v) for v in parts[2:]])
    return EmbeddingFile(region, ids, labels, np.array(rows, dtype=np.float64).reshape(-1, dim))


def make_store(gallery, probes):
    """Pair a gallery file and a probe file of the same region."""
    if gallery.region_id != probes.region_id:
        raise ValueError("gallery and probe files belong to different regions")
    if any(lab is None for lab in gallery.labels):
        raise ValueError(f"region {gallery.region_id}: gallery records must be labelled")
    truth = probes.labels if probes.labeled else None
    return RegionEmbeddingStore(gallery.region_id, gallery.ids, gallery.labels,
                                gallery.features, probes.ids, probes.features, truth)


# -- fusion parameters ----------------------------------------------------------

def write_fusion(path, config):
    with atomic_write(path) as fh:
        fh.write(f"# missing_region_policy={config.missing_region_policy.value}\n")
        fh.write("region,beta0,beta1,gamma\n")
        for r in sorted(config.regions):
            p = config.regions[r]
            fh.write(f"{r},{fmt(p.beta0)},{fmt(p.beta1)},{fmt(p.gamma)}\n")


def read_fusion(path):
    policy = MissingRegionPolicy.RENORMALIZE_GAMMA
    regions = {}
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                key, _, val = line[1:].strip().partition("=")
                if key.strip() == "missing_region_policy":
                    policy = MissingRegionPolicy(val.strip())
                continue
            if line.startswith("region"):
                continue
            r, b0, b1, g = line.split(",")
            regions[int(r)] = RegionParams(float(b0), float(b1), float(g))
    return FusionConfig(regions, policy)


# -- statistics -----------------------------------------------------------------

def write_stats(path, stats):
    with atomic_write(path) as fh:
        fh.write(f"mean_intra,{fmt(stats.mean_intra_cosine)}\n")
        fh.write(f"mean_inter,{fmt(stats.mean_inter_cosine)}\n")
        fh.write(f"margin,{fmt(stats.margin)}\n")
        fh.write("bin_lo,bin_hi,intra,inter\n")
        e = stats.bin_edges
        for i in range(len(e) - 1):
            fh.write(f"{fmt(e[i])},{fmt(e[i + 1])},{int(stats.histogram_intra[i])},"
                     f"{int(stats.histogram_inter[i])}\n")


def write_history(path, history):
    with atomic_write(path) as fh:
        fh.write("epoch,loss,accuracy\n")
        for h in history:
            fh.write(f"{h['epoch']},{fmt(h['loss'])},{fmt(h['train_accuracy'])}\n")
