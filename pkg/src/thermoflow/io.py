"""CSV tables and binary checkpoints.

CSV files carry a fixed header and use ``%.17g`` for floats, so every table
round-trips bit for bit through its reader.  Checkpoints are a text manifest
(one ``tensor name shape`` line per array) followed by the raw little-endian
float64 blobs in manifest order.
"""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np

from . import diffusion as dm
from . import nn
from .epinet import Epinet, EpinetSpec
from .fem import DatasetF, DatasetK1, neighbour_stencil
from .models import BaselineModel, FModel, K1Model

MAGIC = "thermoflow-checkpoint 1"

# --------------------------------------------------------------------------- #
# CSV

SNAPSHOT_RAW = ("realization", "time", "site", "eta")
SNAPSHOT_PROJECTED = ("realization", "time", "node", "rho")
DATASET_K1 = ("sample", "z_left", "z_mid", "z_right", "k0", "k1")
DATASET_F = ("sample", "node", "b_j", "k_row_m1", "k_row_0", "k_row_p1", "z_m1", "z_0", "z_p1", "upsilon")
TRAJECTORY = ("time", "node", "mean", "std", "ci_lo", "ci_hi")
INT_COLUMNS = {"realization", "site", "eta", "node", "sample"}


def _atomic(path: Path, write):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    write(tmp)
    os.replace(tmp, path)


def write_csv(path, header, columns) -> Path:
    """Write equal-length columns; integer columns listed in ``INT_COLUMNS``."""
    header = tuple(header)
    cols = [np.asarray(c).reshape(-1) for c in columns]
    if len(cols) != len(header):
        raise ValueError("header and columns disagree")
    n = cols[0].size if cols else 0
    if any(c.size != n for c in cols):
        raise ValueError("columns must have equal length")
    fmt = ["%d" if h in INT_COLUMNS else "%.17g" for h in header]
    data = np.column_stack([c.astype(np.float64) for c in cols]) if n else np.zeros((0, len(cols)))

    def write(tmp):
        with open(tmp, "w") as fh:
            fh.write(",".join(header) + "\n")
            if n:
                np.savetxt(fh, data, fmt=fmt, delimiter=",")

    _atomic(Path(path), write)
    return Path(path)


def read_csv(path, header) -> dict:
    """Columns by name; raises if the header differs from ``header``."""
    with open(path) as fh:
        found = tuple(fh.readline().strip().split(","))
        if found != tuple(header):
            raise ValueError(f"{path}: expected header {','.join(header)}, found {','.join(found)}")
        body = fh.read()
    if body.strip():
        data = np.loadtxt(body.splitlines(), delimiter=",", ndmin=2, dtype=np.float64)
    else:
        data = np.zeros((0, len(header)))
    out = {}
    for k, h in enumerate(header):
        col = data[:, k]
        out[h] = col.astype(np.int64) if h in INT_COLUMNS else col
    return out


def write_snapshots(path, times, snaps, projected: bool = False):
    """``snaps`` is (R, T, N) occupations, or nodal densities when ``projected``."""
    snaps = np.asarray(snaps)
    r, t, n = snaps.shape
    ri, ti, si = np.meshgrid(np.arange(r), np.arange(t), np.arange(n), indexing="ij")
    header = SNAPSHOT_PROJECTED if projected else SNAPSHOT_RAW
    return write_csv(path, header, [ri, np.asarray(times)[ti], si, snaps])


def read_snapshots(path, projected: bool = False):
    """Inverse of :func:`write_snapshots`: ``(times, snaps)``."""
    header = SNAPSHOT_PROJECTED if projected else SNAPSHOT_RAW
    c = read_csv(path, header)
    r = int(c["realization"].max()) + 1
    n = int(c[header[2]].max()) + 1
    times = np.unique(c["time"])
    vals = c[header[3]].reshape(r, times.size, n)
    return times, (vals if projected else vals.astype(np.uint8))


def write_dataset_k1(path, dk: DatasetK1):
    return write_csv(path, DATASET_K1, [np.arange(len(dk)), dk.z[:, 0], dk.z[:, 1], dk.z[:, 2], dk.k0, dk.k1])


def read_dataset_k1(path) -> DatasetK1:
    c = read_csv(path, DATASET_K1)
    return DatasetK1(np.column_stack([c["z_left"], c["z_mid"], c["z_right"]]), c["k0"], c["k1"])


def write_dataset_f(path, df: DatasetF, samples=None):
    """``samples`` labels the profile each row came from (default: blocks of equal node runs)."""
    if samples is None:
        samples = np.cumsum(df.node == 0) - 1
    return write_csv(path, DATASET_F, [samples, df.node, df.b, df.k_rows[:, 0], df.k_rows[:, 1],
                                       df.k_rows[:, 2], df.zf[:, 0], df.zf[:, 1], df.zf[:, 2],
                                       df.upsilon[:, 1]])


def read_dataset_f(path) -> DatasetF:
    c = read_csv(path, DATASET_F)
    # the Upsilon stencil is rebuilt per profile from the centre values
    ups = np.zeros((c["sample"].size, 3))
    for s in np.unique(c["sample"]):
        idx = np.flatnonzero(c["sample"] == s)
        ups[idx] = neighbour_stencil(c["upsilon"][idx])
    return DatasetF(c["node"], c["b_j"], np.column_stack([c["k_row_m1"], c["k_row_0"], c["k_row_p1"]]),
                    np.column_stack([c["z_m1"], c["z_0"], c["z_p1"]]), ups)


def write_trajectory(path, times, mean, std=None, lo=None, hi=None):
    """Trajectory table; a deterministic run has zero std and a degenerate band."""
    mean = np.asarray(mean, dtype=np.float64)
    std = np.zeros_like(mean) if std is None else std
    lo = mean if lo is None else lo
    hi = mean if hi is None else hi
    ti, ni = np.meshgrid(np.arange(mean.shape[0]), np.arange(mean.shape[1]), indexing="ij")
    return write_csv(path, TRAJECTORY, [np.asarray(times)[ti], ni, mean, std, lo, hi])


def read_trajectory(path) -> dict:
    """Columns reshaped to (T, N_gamma) plus ``times``."""
    c = read_csv(path, TRAJECTORY)
    times = np.unique(c["time"])
    n = int(c["node"].max()) + 1
    out = {k: c[k].reshape(times.size, n) for k in ("mean", "std", "ci_lo", "ci_hi")}
    out["times"] = times
    return out


def write_metrics(path, metrics: dict):
    """Flat ``key = value`` text."""
    lines = [f"{k} = {_fmt(v)}" for k, v in metrics.items()]
    _atomic(Path(path), lambda tmp: Path(tmp).write_text("\n".join(lines) + "\n"))
    return Path(path)


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def read_metrics(path) -> dict:
    out = {}
    for line in Path(path).read_text().splitlines():
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        k, v = (s.strip() for s in line.split("=", 1))
        out[k] = _parse_scalar(v)
    return out


def _parse_scalar(v: str):
    if v in ("true", "false"):
        return v == "true"
    for cast in (int, float):
        try:
            return cast(v)
        except ValueError:
            pass
    return v


# --------------------------------------------------------------------------- #
# Checkpoints


def save_checkpoint(path, tensors: dict, meta: dict | None = None) -> Path:
    """Manifest lines ``meta key value`` / ``tensor name d0,d1,...`` then blobs."""
    lines = [MAGIC]
    for k, v in (meta or {}).items():
        if any(c.isspace() for c in str(k)) or "\n" in str(v):
            raise ValueError(f"bad meta entry {k!r}")
        lines.append(f"meta {k} {v}")
    arrays = []
    for name, arr in tensors.items():
        a = np.asarray(arr, dtype="<f8")
        if any(c.isspace() for c in name):
            raise ValueError(f"bad tensor name {name!r}")
        lines.append(f"tensor {name} {','.join(map(str, a.shape)) or 'scalar'}")
        arrays.append(a)
    lines.append("end")

    def write(tmp):
        with open(tmp, "wb") as fh:
            fh.write(("\n".join(lines) + "\n").encode())
            for a in arrays:
                fh.write(a.tobytes())

    _atomic(Path(path), write)
    return Path(path)


def load_checkpoint(path):
    """``(tensors, meta)`` from :func:`save_checkpoint`."""
    raw = Path(path).read_bytes()
    pos, meta, spec = 0, {}, []
    first = True
    while True:
        nl = raw.index(b"\n", pos)
        line = raw[pos:nl].decode()
        pos = nl + 1
        if first:
            if line != MAGIC:
                raise ValueError(f"{path}: not a checkpoint")
            first = False
            continue
        if line == "end":
            break
        kind, name, rest = line.split(" ", 2)
        if kind == "meta":
            meta[name] = rest
        elif kind == "tensor":
            spec.append((name, () if rest == "scalar" else tuple(int(s) for s in rest.split(","))))
        else:
            raise ValueError(f"{path}: bad manifest line {line!r}")
    tensors = {}
    for name, shape in spec:
        count = int(np.prod(shape)) if shape else 1
        a = np.frombuffer(raw, dtype="<f8", count=count, offset=pos)
        tensors[name] = a.reshape(shape).astype(np.float64)
        pos += 8 * count
    if pos != len(raw):
        raise ValueError(f"{path}: trailing bytes after blobs")
    return tensors, meta


def _put_mlp(t: dict, prefix: str, p: nn.MlpParams):
    for k, (w, b) in enumerate(zip(p.weights, p.biases)):
        t[f"{prefix}.W{k}"] = w
        t[f"{prefix}.b{k}"] = b


def _get_mlp(t: dict, prefix: str) -> nn.MlpParams:
    ws, bs = [], []
    while f"{prefix}.W{len(ws)}" in t:
        ws.append(t[f"{prefix}.W{len(ws)}"].copy())
        bs.append(t[f"{prefix}.b{len(bs)}"].copy())
    if not ws:
        raise KeyError(f"no network {prefix!r} in checkpoint")
    return nn.MlpParams(ws, bs)


def _put_scaler(t, name, s: dm.Standardizer):
    t[name] = np.array([s.mean, s.std])


def _get_scaler(t, name) -> dm.Standardizer:
    return dm.Standardizer(float(t[name][0]), float(t[name][1]))


def save_k1_model(path, m: K1Model):
    t = {}
    _put_mlp(t, "net", m.params)
    t["schedule.betas"] = m.schedule.betas
    t["schedule.alpha_bar"] = m.schedule.alpha_bar
    _put_scaler(t, "scaler.target", m.target)
    _put_scaler(t, "scaler.raw", m.raw)
    t["history"] = m.history
    return save_checkpoint(path, t, {"kind": "k1", "trained": int(m.trained)})


def _schedule(t):
    return dm.DiffusionSchedule(t["schedule.betas"], t["schedule.alpha_bar"])


def load_k1_model(path) -> K1Model:
    t, meta = load_checkpoint(path)
    if meta.get("kind") != "k1":
        raise ValueError(f"{path}: not a K1 checkpoint")
    return K1Model(_get_mlp(t, "net"), _schedule(t), _get_scaler(t, "scaler.target"),
                   _get_scaler(t, "scaler.raw"), bool(int(meta["trained"])), t["history"])


def save_f_model(path, m: FModel):
    t = {}
    _put_mlp(t, "net", m.params)
    t["schedule.betas"] = m.schedule.betas
    t["schedule.alpha_bar"] = m.schedule.alpha_bar
    _put_scaler(t, "scaler.target", m.target)
    t["history"] = m.history
    return save_checkpoint(path, t, {"kind": "f", "trained": int(m.trained)})


def load_f_model(path) -> FModel:
    t, meta = load_checkpoint(path)
    if meta.get("kind") != "f":
        raise ValueError(f"{path}: not an f checkpoint")
    return FModel(_get_mlp(t, "net"), _schedule(t), _get_scaler(t, "scaler.target"),
                  bool(int(meta["trained"])), t["history"])


def save_epinet(path, e: Epinet):
    t = {}
    for k, p in enumerate(e.priors):
        _put_mlp(t, f"prior{k}", p)
    _put_mlp(t, "learnable", e.learnable)
    s = e.spec
    meta = {"kind": "epinet", "index_dim": s.index_dim, "prior_scale": repr(float(s.prior_scale)),
            "prior_hidden": ",".join(map(str, s.prior_hidden)),
            "learn_hidden": ",".join(map(str, s.learn_hidden)), "epochs": s.epochs,
            "lr": repr(float(s.lr)), "indices_per_epoch": s.indices_per_epoch}
    return save_checkpoint(path, t, meta)


def load_epinet(path) -> Epinet:
    t, meta = load_checkpoint(path)
    if meta.get("kind") != "epinet":
        raise ValueError(f"{path}: not an epinet checkpoint")
    spec = EpinetSpec(index_dim=int(meta["index_dim"]), prior_scale=float(meta["prior_scale"]),
                      prior_hidden=tuple(int(v) for v in meta["prior_hidden"].split(",")),
                      learn_hidden=tuple(int(v) for v in meta["learn_hidden"].split(",")),
                      epochs=int(meta["epochs"]), lr=float(meta["lr"]),
                      indices_per_epoch=int(meta["indices_per_epoch"]))
    priors = [_get_mlp(t, f"prior{k}") for k in range(spec.index_dim)]
    return Epinet(spec, priors, _get_mlp(t, "learnable"))


def save_baseline(path, m: BaselineModel):
    t = {}
    _put_mlp(t, "k1", m.k1_params)
    _put_mlp(t, "f", m.f_params)
    _put_scaler(t, "scaler.target", m.target)
    _put_scaler(t, "scaler.raw", m.raw)
    t["k1_history"] = m.k1_history
    t["f_history"] = m.f_history
    return save_checkpoint(path, t, {"kind": "baseline"})


def load_baseline(path) -> BaselineModel:
    t, meta = load_checkpoint(path)
    if meta.get("kind") != "baseline":
        raise ValueError(f"{path}: not a baseline checkpoint")
    return BaselineModel(_get_mlp(t, "k1"), _get_mlp(t, "f"), _get_scaler(t, "scaler.target"),
                         _get_scaler(t, "scaler.raw"), t["k1_history"], t["f_history"])
