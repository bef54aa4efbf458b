"""Desk-scale decomposition networks, losses, training and inference.

Two variants:

* ``base`` -- independent shade and albedo estimators (encoder + head each),
  trained step by step: shade first, then albedo with shade frozen.
* ``full`` -- shared encoder with pre-albedo / pre-shade heads, a global
  light feature from the PLD map, and refinement heads reading the
  per-point 9-vector ``[A', S', L]``. Trained simultaneously.

Ablation flags on ``ModelConfig`` drop the light feature (``use_pld``), the
refinement stage (``use_hfr``) or the shared encoder (``share_encoder``).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from ipcd import autodiff as ad
from ipcd.pcio import IntrinsicTriplet, PointCloud, normalize_cloud
from ipcd.projection import PLDMap

FORMAT_VERSION = "ipcd-params/1"


class ConfigError(ValueError):
    pass


class MissingPLDError(ValueError):
    pass


# --------------------------------------------------------------------------- neighborhoods

def knn_indices(positions: np.ndarray, k: int) -> np.ndarray:
    """k nearest neighbors per point, self excluded, ties broken by lower index."""
    positions = np.asarray(positions, dtype=np.float64)
    n = len(positions)
    if k >= n:
        raise ConfigError(f"k={k} must be smaller than the number of points ({n})")
    if k == 0:
        return np.zeros((n, 0), dtype=np.int64)
    tree = cKDTree(positions)
    out = np.empty((n, k), dtype=np.int64)
    rows = np.arange(n)
    m = min(n, k + 2)  # one spare beyond self so a clean cut is visible
    while rows.size:
        _, cand = tree.query(positions[rows], k=m)
        cand = np.asarray(cand, dtype=np.int64).reshape(len(rows), m)
        d2 = ((positions[cand] - positions[rows, None, :]) ** 2).sum(-1)
        reach = d2.max(axis=1)  # every point left out of the query is at least this far
        d2[cand == rows[:, None]] = np.inf
        r = np.repeat(np.arange(len(rows)), m)
        order = np.lexsort((cand.ravel(), d2.ravel(), r)).reshape(len(rows), m)
        cand = cand.ravel()[order]
        d2 = d2.ravel()[order]
        # a tie at the cut may hide a lower index beyond the query
        tied = d2[:, k - 1] >= reach if m < n else np.zeros(len(rows), bool)
        done = ~tied
        out[rows[done]] = cand[done, :k]
        rows = rows[tied]
        m = min(n, 2 * m)
    return out


# --------------------------------------------------------------------------- parameters

@dataclass(frozen=True)
class ModelConfig:
    variant: str = "full"          # base | full
    use_pld: bool = True
    use_hfr: bool = True
    share_encoder: bool = True
    width: int = 64
    head_width: int = 32
    pld_width: int = 8
    blocks: int = 2
    k: int = 16
    pld_shape: tuple = (9, 36)
    chunk: int = 2048              # inference chunk size, matches training batch density

    def __post_init__(self):
        if self.variant not in ("base", "full"):
            raise ConfigError(f"variant must be 'base' or 'full', got {self.variant!r}")

    @property
    def needs_pld(self) -> bool:
        return self.variant == "full" and self.use_pld and self.use_hfr


@dataclass
class ModelParams:
    config: ModelConfig
    arrays: dict = field(default_factory=dict)

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: v.copy() for k, v in self.arrays.items()})

    def sections(self) -> list[str]:
        return sorted({k.split(".")[0] for k in self.arrays})

    def flat(self) -> np.ndarray:
        return np.concatenate([self.arrays[k].ravel() for k in sorted(self.arrays)])

    def unflat(self, vec: np.ndarray) -> dict[str, np.ndarray]:
        out, pos = {}, 0
        for k in sorted(self.arrays):
            a = self.arrays[k]
            out[k] = vec[pos: pos + a.size].reshape(a.shape)
            pos += a.size
        return out

    def save(self, path) -> None:
        manifest = {
            "format": FORMAT_VERSION,
            "config": asdict(self.config),
            "shapes": {k: list(v.shape) for k, v in sorted(self.arrays.items())},
        }
        with open(path, "wb") as f:
            np.savez(f, __manifest__=np.array(json.dumps(manifest, sort_keys=True)),
                     **{k: v for k, v in sorted(self.arrays.items())})

    @classmethod
    def load(cls, path) -> "ModelParams":
        with np.load(path, allow_pickle=False) as data:
            manifest = json.loads(str(data["__manifest__"]))
            if manifest.get("format") != FORMAT_VERSION:
                raise ConfigError(f"unsupported params format {manifest.get('format')!r}")
            cfg = manifest["config"]
            cfg["pld_shape"] = tuple(cfg["pld_shape"])
            arrays = {k: np.array(data[k]) for k in manifest["shapes"]}
        for k, shape in manifest["shapes"].items():
            if list(arrays[k].shape) != shape:
                raise ConfigError(f"params entry {k} has shape {arrays[k].shape}, manifest says {shape}")
        return cls(ModelConfig(**cfg), arrays)


def _dense(arrays, rng, name, fan_in, fan_out, gain=2.0):
    arrays[name + ".W"] = rng.normal(0.0, np.sqrt(gain / fan_in), size=(fan_in, fan_out))
    arrays[name + ".b"] = np.zeros((1, fan_out))


def _init_encoder(arrays, rng, prefix, cfg: ModelConfig):
    _dense(arrays, rng, prefix + ".in0", 6, cfg.width)
    _dense(arrays, rng, prefix + ".in1", cfg.width, cfg.width)
    for b in range(cfg.blocks):
        _dense(arrays, rng, f"{prefix}.agg{b}", 2 * cfg.width, cfg.width)


def _init_head(arrays, rng, prefix, fan_in, cfg: ModelConfig):
    _dense(arrays, rng, prefix + ".h", fan_in, cfg.head_width)
    _dense(arrays, rng, prefix + ".out", cfg.head_width, 3, gain=1.0)


def init_params(cfg: ModelConfig, seed: int = 0) -> ModelParams:
    rng = np.random.default_rng(seed)
    arrays: dict[str, np.ndarray] = {}
    if cfg.variant == "base":
        for stack in ("shade", "albedo"):
            _init_encoder(arrays, rng, f"{stack}_enc", cfg)
            _init_head(arrays, rng, f"{stack}_head", cfg.width, cfg)
        return ModelParams(cfg, arrays)

    if cfg.share_encoder:
        _init_encoder(arrays, rng, "enc", cfg)
    else:
        _init_encoder(arrays, rng, "enc_albedo", cfg)
        _init_encoder(arrays, rng, "enc_shade", cfg)
    if cfg.use_hfr:
        _init_head(arrays, rng, "pre_albedo", cfg.width, cfg)
        _init_head(arrays, rng, "pre_shade", cfg.width, cfg)
        refine_in = 9 if cfg.use_pld else 6
        _init_head(arrays, rng, "albedo_head", refine_in, cfg)
        _init_head(arrays, rng, "shade_head", refine_in, cfg)
        if cfg.use_pld:
            _dense(arrays, rng, "pld.l0", 5, cfg.pld_width)
            _dense(arrays, rng, "pld.l1", cfg.pld_width, cfg.pld_width)
            _dense(arrays, rng, "pld.out", cfg.pld_width, 3, gain=1.0)
    else:
        _init_head(arrays, rng, "albedo_head", cfg.width, cfg)
        _init_head(arrays, rng, "shade_head", cfg.width, cfg)
    return ModelParams(cfg, arrays)


# --------------------------------------------------------------------------- forward

@dataclass
class Prediction:
    albedo: object
    shade: object
    pre_albedo: object = None
    pre_shade: object = None

    def numpy(self) -> "Prediction":
        def v(x):
            return None if x is None else (x.value if isinstance(x, ad.Tensor) else np.asarray(x))
        return Prediction(v(self.albedo), v(self.shade), v(self.pre_albedo), v(self.pre_shade))

    def take(self, idx) -> "Prediction":
        p = self.numpy()
        return Prediction(*(None if x is None else x[idx] for x in (p.albedo, p.shade, p.pre_albedo, p.pre_shade)))


def _linear(p, name, x):
    return ad.add(ad.matmul(x, p[name + ".W"]), p[name + ".b"])


def _head(p, prefix, x):
    h = ad.relu(_linear(p, prefix + ".h", x))
    return ad.sigmoid(_linear(p, prefix + ".out", h))


def encode_tensors(p, prefix: str, features: np.ndarray, knn: np.ndarray, blocks: int = 2):
    h = ad.relu(_linear(p, prefix + ".in0", ad.const(features)))
    h = ad.relu(_linear(p, prefix + ".in1", h))
    for b in range(blocks):
        if knn.shape[1] == 0:
            agg = h  # isolated point: self-only aggregation
        else:
            agg = ad.gather_max(h, knn)
        h = ad.relu(_linear(p, f"{prefix}.agg{b}", ad.concat([h, agg])))
    return h


def point_features(cloud: PointCloud) -> np.ndarray:
    return np.concatenate([cloud.positions, cloud.colors], axis=1)


def encode(cloud: PointCloud, knn: np.ndarray, params: ModelParams, prefix: str | None = None) -> np.ndarray:
    """Per-point encoder features (N x width) for a normalized cloud."""
    if prefix is None:
        prefix = "enc" if "enc.in0.W" in params.arrays else sorted(
            {k.split(".")[0] for k in params.arrays if k.endswith(".in0.W")})[0]
    if len(knn) != len(cloud):
        raise ad.ShapeError(f"encode: knn has {len(knn)} rows for {len(cloud)} points")
    p = {k: ad.const(v) for k, v in params.arrays.items()}
    return encode_tensors(p, prefix, point_features(cloud), knn, params.config.blocks).value


def pld_inputs(pld: PLDMap) -> tuple[np.ndarray, np.ndarray]:
    """Per-cell features (r, g, b, coverage, sin theta) and pooling weights."""
    T, P = pld.grid.shape
    sin_t = np.repeat(np.sin(np.radians(pld.grid.thetas))[:, None], P, axis=1)
    feats = np.concatenate([pld.values, pld.coverage[..., None], sin_t[..., None]], axis=-1).reshape(T * P, 5)
    weights = pld.grid.band_areas().reshape(1, T * P)
    return feats, weights


def pld_encode_tensors(p, pld: PLDMap, expected_shape=None):
    if expected_shape is not None and tuple(pld.grid.shape) != tuple(expected_shape):
        raise ad.ShapeError(f"pld_encode: grid shape {pld.grid.shape} does not match trained {tuple(expected_shape)}")
    feats, weights = pld_inputs(pld)
    h = ad.relu(_linear(p, "pld.l0", ad.const(feats)))
    h = ad.relu(_linear(p, "pld.l1", h))
    pooled = ad.matmul(ad.const(weights), h)  # area-weighted global mean
    return _linear(p, "pld.out", pooled)      # 1 x 3


def pld_encode(pld: PLDMap, params: ModelParams) -> np.ndarray:
    p = {k: ad.const(v) for k, v in params.arrays.items()}
    return pld_encode_tensors(p, pld, params.config.pld_shape).value.ravel()


def forward_tensors(p, cfg: ModelConfig, cloud: PointCloud, knn: np.ndarray, pld: PLDMap | None) -> Prediction:
    feats = point_features(cloud)
    n = len(cloud)
    if cfg.variant == "base":
        s = _head(p, "shade_head", encode_tensors(p, "shade_enc", feats, knn, cfg.blocks))
        a = _head(p, "albedo_head", encode_tensors(p, "albedo_enc", feats, knn, cfg.blocks))
        return Prediction(a, s)

    if cfg.share_encoder:
        h_a = h_s = encode_tensors(p, "enc", feats, knn, cfg.blocks)
    else:
        h_a = encode_tensors(p, "enc_albedo", feats, knn, cfg.blocks)
        h_s = encode_tensors(p, "enc_shade", feats, knn, cfg.blocks)
    if not cfg.use_hfr:
        return Prediction(_head(p, "albedo_head", h_a), _head(p, "shade_head", h_s))

    pre_a = _head(p, "pre_albedo", h_a)
    pre_s = _head(p, "pre_shade", h_s)
    parts = [pre_a, pre_s]
    if cfg.use_pld:
        if pld is None:
            raise MissingPLDError("this model needs a PLD map; run compute_pld (or the `pld` subcommand) first")
        light = pld_encode_tensors(p, pld, cfg.pld_shape)
        parts.append(ad.matmul(ad.const(np.ones((n, 1))), light))  # broadcast L to N x 3
    z = ad.concat(parts)
    return Prediction(_head(p, "albedo_head", z), _head(p, "shade_head", z), pre_a, pre_s)


def _const_params(params: ModelParams):
    return {k: ad.const(v) for k, v in params.arrays.items()}


def forward_full(cloud: PointCloud, pld: PLDMap | None, params: ModelParams, knn: np.ndarray | None = None) -> Prediction:
    if params.config.variant != "full":
        raise ConfigError("forward_full needs full-variant params")
    knn = _default_knn(cloud, params.config.k) if knn is None else knn
    return forward_tensors(_const_params(params), params.config, cloud, knn, pld).numpy()


def forward_base(cloud: PointCloud, params: ModelParams, knn: np.ndarray | None = None) -> Prediction:
    if params.config.variant != "base":
        raise ConfigError("forward_base needs base-variant params")
    knn = _default_knn(cloud, params.config.k) if knn is None else knn
    return forward_tensors(_const_params(params), params.config, cloud, knn, None).numpy()


def _default_knn(cloud: PointCloud, k: int) -> np.ndarray:
    return knn_indices(cloud.positions, min(k, len(cloud) - 1))


# --------------------------------------------------------------------------- losses

TERMS = ("alb", "shd", "phy", "alb_pre", "shd_pre", "phy_pre")


@dataclass(frozen=True)
class LossConfig:
    lam: float = 0.1
    terms: tuple = TERMS  # enabled terms

    def __post_init__(self):
        if not np.isfinite(self.lam) or self.lam < 0:
            raise ConfigError("lambda must be finite and >= 0")


def loss_total(pred: Prediction, truth: IntrinsicTriplet, cfg: LossConfig = LossConfig()):
    """Frobenius-norm point losses; pre-estimation terms scaled by lambda.

    Returns ``(total Tensor, {term: float})``. Terms whose inputs are absent
    (e.g. pre-terms for the base variant) are skipped.
    """
    A, S, I = truth.albedo, truth.shade, truth.cloud.colors
    terms = {}

    def want(name):
        return name in cfg.terms

    if want("alb"):
        terms["alb"] = ad.frobenius_norm(ad.sub(A, pred.albedo))
    if want("shd"):
        terms["shd"] = ad.frobenius_norm(ad.sub(S, pred.shade))
    if want("phy"):
        terms["phy"] = ad.frobenius_norm(ad.sub(I, ad.mul(pred.albedo, pred.shade)))
    if pred.pre_albedo is not None and pred.pre_shade is not None:
        if want("alb_pre"):
            terms["alb_pre"] = ad.frobenius_norm(ad.sub(A, pred.pre_albedo))
        if want("shd_pre"):
            terms["shd_pre"] = ad.frobenius_norm(ad.sub(S, pred.pre_shade))
        if want("phy_pre"):
            terms["phy_pre"] = ad.frobenius_norm(ad.sub(I, ad.mul(pred.pre_albedo, pred.pre_shade)))

    total = None
    for name, t in terms.items():
        t = ad.scale(t, cfg.lam) if name.endswith("_pre") else t
        total = t if total is None else ad.add(total, t)
    if total is None:
        total = ad.const(0.0)
    return total, {name: float(t.value) for name, t in terms.items()}


# --------------------------------------------------------------------------- training

@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 5000
    points: int = 2048
    k: int = 16
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    variant: str = "full"
    mode: str = ""          # simultaneous | step-by-step; empty -> variant default
    lam: float = 0.1
    use_pld: bool = True
    use_hfr: bool = True
    share_encoder: bool = True
    log_every: int = 0
    batch_pool: int = 8     # cached batches per sample (0: fresh batch every iteration)

    def __post_init__(self):
        if self.iterations <= 0 or self.points <= 0 or self.k < 0:
            raise ConfigError("iterations and points must be positive, k non-negative")
        if self.batch_pool < 0:
            raise ConfigError("batch_pool must be non-negative")
        if self.variant not in ("base", "full"):
            raise ConfigError(f"variant must be 'base' or 'full', got {self.variant!r}")
        if self.resolved_mode not in ("simultaneous", "step-by-step"):
            raise ConfigError(f"unknown training mode {self.mode!r}")
        if self.variant == "full" and self.resolved_mode == "step-by-step":
            raise ConfigError("the full variant has no separate stacks to train step by step")

    @property
    def resolved_mode(self) -> str:
        if self.mode:
            return self.mode
        return "step-by-step" if self.variant == "base" else "simultaneous"

    def model_config(self, pld_shape=(9, 36)) -> ModelConfig:
        return ModelConfig(variant=self.variant, use_pld=self.use_pld, use_hfr=self.use_hfr,
                           share_encoder=self.share_encoder, k=self.k, pld_shape=tuple(pld_shape),
                           chunk=self.points)


@dataclass
class TrainSample:
    """One normalized triplet with its PLD map."""

    triplet: IntrinsicTriplet
    pld: PLDMap | None = None
    name: str = ""

    @classmethod
    def prepare(cls, triplet: IntrinsicTriplet, pld: PLDMap | None = None, name: str = "") -> "TrainSample":
        cloud, _ = normalize_cloud(triplet.cloud)
        return cls(IntrinsicTriplet(cloud, triplet.albedo, triplet.shade, triplet.sun), pld, name)


@dataclass
class TrainResult:
    params: ModelParams
    history: list = field(default_factory=list)  # dicts: iteration, phase, total, per-term


def _phase_for(cfg: TrainConfig, it: int) -> str:
    if cfg.resolved_mode == "simultaneous":
        return "joint"
    return "shade" if it < cfg.iterations // 2 else "albedo"


def _phase_setup(phase: str, arrays: dict, lam: float):
    if phase == "shade":
        return {k for k in arrays if k.startswith("shade_")}, LossConfig(lam, ("shd",))
    if phase == "albedo":
        return {k for k in arrays if k.startswith("albedo_")}, LossConfig(lam, ("alb", "shd", "phy"))
    return set(arrays), LossConfig(lam)


def train(dataset: list[TrainSample], cfg: TrainConfig, progress=None) -> TrainResult:
    """Adam on random point batches; deterministic per seed.

    Each sample owns ``batch_pool`` lazily drawn batches whose kNN graphs are
    computed once and reused.

    Step-by-step mode trains the shade stack on the shade loss for the first
    half of the iterations, then freezes it and trains the albedo stack.
    """
    if not dataset:
        raise ValueError("training needs at least one sample")
    pld_shape = next((s.pld.grid.shape for s in dataset if s.pld is not None), (9, 36))
    mcfg = cfg.model_config(pld_shape)
    if mcfg.needs_pld and any(s.pld is None for s in dataset):
        raise MissingPLDError("full variant training needs a PLD map for every sample")
    params = init_params(mcfg, cfg.seed)
    arrays = params.arrays
    state = ad.AdamState(cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    rng = np.random.default_rng(cfg.seed + 1)
    history = []
    pool = {}
    for it in range(cfg.iterations):
        phase = _phase_for(cfg, it)
        active, lcfg = _phase_setup(phase, arrays, cfg.lam)
        si = int(rng.integers(len(dataset)))
        slot = int(rng.integers(cfg.batch_pool)) if cfg.batch_pool else -1
        key = (si, slot)
        if key not in pool:
            sample = dataset[si]
            n = len(sample.triplet)
            m = min(cfg.points, n)
            idx = np.sort(rng.choice(n, size=m, replace=False))
            batch = sample.triplet.take(idx)
            pool[key] = (batch, knn_indices(batch.cloud.positions, min(cfg.k, m - 1)))
        batch, knn = pool[key]
        sample = dataset[si]

        tape = ad.Tape()
        p = tape.bind(arrays, active)
        pred = forward_tensors(p, mcfg, batch.cloud, knn, sample.pld)
        loss, terms = loss_total(pred, batch, lcfg)
        grads = ad.backward(loss)
        arrays = ad.adam_step(arrays, grads, state)

        record = {"iteration": it, "phase": phase, "total": float(loss.value), **terms}
        history.append(record)
        if slot < 0:
            del pool[key]
        if progress is not None and cfg.log_every and (it + 1) % cfg.log_every == 0:
            progress(record)
    return TrainResult(ModelParams(mcfg, arrays), history)


def write_history_csv(history: list[dict], path) -> None:
    import csv

    cols = ["iteration", "phase", "total", *TERMS]
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=cols, restval="")
        w.writeheader()
        for row in history:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


# --------------------------------------------------------------------------- inference

def _canonical_order(cloud: PointCloud) -> np.ndarray:
    p, c = cloud.positions, cloud.colors
    return np.lexsort((c[:, 2], c[:, 1], c[:, 0], p[:, 2], p[:, 1], p[:, 0]))


def infer(cloud: PointCloud, pld: PLDMap | None, params: ModelParams, seed: int = 0) -> Prediction:
    """Decompose a cloud; output rows follow the input point order.

    The normalized cloud is split into random chunks of the training batch
    size so neighborhoods have the density seen during training. Chunks are
    drawn from a canonical point order, which makes the result independent
    of the input ordering.
    """
    cfg = params.config
    if cfg.needs_pld and pld is None:
        raise MissingPLDError("this full-variant model needs a PLD map; compute one with `ipcd pld` "
                              "(projection.compute_pld) and pass it in")
    if not cfg.needs_pld:
        pld = None
    canon = _canonical_order(cloud)  # on raw values so reordering the input cannot change any rounding
    norm_c, _ = normalize_cloud(cloud.take(canon))
    n = len(norm_c)
    norm = norm_c.take(np.argsort(canon))
    perm = canon[np.random.default_rng(seed).permutation(n)]
    n_chunks = max(1, int(round(n / cfg.chunk)))
    consts = _const_params(params)
    out = {key: np.zeros((n, 3)) for key in ("albedo", "shade", "pre_albedo", "pre_shade")}
    has_pre = False
    for chunk in np.array_split(perm, n_chunks):
        sub = norm.take(chunk)
        knn = knn_indices(sub.positions, min(cfg.k, len(sub) - 1))
        pred = forward_tensors(consts, cfg, sub, knn, pld).numpy()
        out["albedo"][chunk] = pred.albedo
        out["shade"][chunk] = pred.shade
        if pred.pre_albedo is not None:
            has_pre = True
            out["pre_albedo"][chunk] = pred.pre_albedo
            out["pre_shade"][chunk] = pred.pre_shade
    return Prediction(out["albedo"], out["shade"],
                      out["pre_albedo"] if has_pre else None, out["pre_shade"] if has_pre else None)


def save_params(params: ModelParams, path) -> None:
    params.save(Path(path))


def load_params(path) -> ModelParams:
    return ModelParams.load(Path(path))
