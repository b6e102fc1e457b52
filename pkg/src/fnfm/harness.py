"""Training loop, evaluation, synthetic data and the three experiment studies.

The studies are:

* interaction-layer ablation: FNFM with concatenated vs pooled pair products
* batch-norm ablation: FNFM with and without BN, plus the spread of the
  per-dimension standard deviation of the MLP input
* model comparison: grid search per model kind, selected on validation log-loss
"""

import csv
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .data import Dataset, FieldSchema
from .errors import ConfigError, NumericError
from .interactions import FieldAwareInteraction, pair_order
from .metrics import MetricsReport, evaluate_predictions
from .models import KINDS, ModelSpec, build_model, param_count
from .nn import grad_check, sigmoid
from .optim import OptimizerConfig, make_optimizer, minibatch_iter
from .sparse import densify

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    model: ModelSpec
    optimizer: OptimizerConfig = OptimizerConfig()
    batch_size: int = 4096
    epochs: int = 20
    patience: int = 3
    eval_every: int = 1
    seed: int = 0
    shuffle_seed: int = 0
    l2_linear: float = 1e-5
    l2_embedding: float = 1e-5
    probe_size: int = 1024
    profile: str = "default"

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.patience < 0:
            raise ConfigError(f"patience must be >= 0, got {self.patience}")
        if self.eval_every < 1:
            raise ConfigError(f"eval_every must be >= 1, got {self.eval_every}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["model"] = ModelSpec.from_dict(d["model"])
        d["optimizer"] = OptimizerConfig(**d.get("optimizer", {}))
        return cls(**d)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float | None = None
    val_auc: float | None = None
    mlp_input_std: list | None = None       # before BN
    mlp_input_std_bn: list | None = None    # after BN (None without BN)


@dataclass
class TrainReport:
    label: str
    config: dict
    initial_val_loss: float
    epochs: list = field(default_factory=list)
    best_epoch: int = 0
    best_val_loss: float = float("inf")
    stopped_early: bool = False
    test: dict | None = None
    param_count: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def curve(self, key: str) -> np.ndarray:
        return np.array([getattr(r, key) for r in self.epochs], dtype=float)

    def epoch(self, k: int) -> EpochRecord:
        return next(r for r in self.epochs if r.epoch == k)

    def write(self, out_dir, stem="train_report"):
        """``<stem>.jsonl`` (one epoch per line), ``<stem>.summary.json`` and
        ``<stem>.std.csv`` with the MLP-input spread diagnostics."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / f"{stem}.jsonl", "w") as fh:
            for rec in self.epochs:
                fh.write(json.dumps({"label": self.label, **asdict(rec)}) + "\n")
        summary = {k: v for k, v in self.to_dict().items() if k != "epochs"}
        (out / f"{stem}.summary.json").write_text(json.dumps(summary, indent=2) + "\n")
        write_std_csv(out / f"{stem}.std.csv", [self])


class TrainingDiverged(NumericError):
    def __init__(self, epoch, batch, norms):
        self.epoch, self.batch, self.norms = epoch, batch, norms
        detail = ", ".join(f"{k}={v:.3g}" for k, v in norms.items())
        super().__init__(f"non-finite training loss at epoch {epoch}, batch {batch}; block norms: {detail}")


def predict(model, ds: Dataset, batch_size=8192) -> np.ndarray:
    """Inference-mode probabilities for every row of ``ds``."""
    out = np.empty(len(ds))
    for start in range(0, len(ds), batch_size):
        sl = slice(start, start + batch_size)
        out[sl] = sigmoid(model.forward(ds.indices[sl], ds.values[sl], training=False))
    return out


def evaluate(model, ds: Dataset, label="", batch_size=8192) -> MetricsReport:
    return evaluate_predictions(predict(model, ds, batch_size), ds.labels, label, ds.split)


def probe_rows(n: int, size: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng([seed, 0x9E37])
    return np.sort(rng.choice(n, size=min(size, n), replace=False))


def train(config: TrainConfig, train_ds: Dataset, val_ds: Dataset, test_ds: Dataset | None = None,
          label: str | None = None):
    """Train with per-epoch validation and early stopping.

    Returns ``(report, model)``; the model holds the parameters of the best
    validation epoch.
    """
    for ds in (val_ds, test_ds):
        if ds is not None and ds.schema != train_ds.schema:
            raise ConfigError("train/validation/test datasets must share one schema")
    spec = config.model
    label = label or spec.kind
    model = build_model(spec, train_ds.schema, config.seed, config.l2_linear, config.l2_embedding)
    opt = make_optimizer(config.optimizer, model.params)
    probe = probe_rows(len(val_ds), config.probe_size, config.seed)
    report = TrainReport(label, config.to_dict(), evaluate(model, val_ds).logloss,
                         param_count=param_count(spec, train_ds.schema))
    best_state, since_best = model.state_dict(), 0
    min_batch = 2 if model.bn is not None else 1

    for epoch in range(1, config.epochs + 1):
        total, seen = 0.0, 0
        for b, rows in enumerate(minibatch_iter(len(train_ds), config.batch_size, config.shuffle_seed, epoch)):
            if rows.size < min_batch:
                continue
            _, nll, grads = model.loss_and_grad(train_ds.indices[rows], train_ds.values[rows],
                                                train_ds.labels[rows])
            if not np.isfinite(nll):
                raise TrainingDiverged(epoch, b, {k: float(np.linalg.norm(p)) for k, p in model.params.items()})
            opt.step(grads)
            total += nll * rows.size
            seen += rows.size
        rec = EpochRecord(epoch, total / seen)
        if epoch % config.eval_every == 0 or epoch == config.epochs:
            metrics = evaluate(model, val_ds)
            rec.val_loss, rec.val_auc = metrics.logloss, metrics.auc
            if model.mlp is not None:
                pre, post = model.mlp_inputs(val_ds.indices[probe], val_ds.values[probe])
                rec.mlp_input_std = pre.std(axis=0).tolist()
                if model.bn is not None:
                    rec.mlp_input_std_bn = post.std(axis=0).tolist()
            if rec.val_loss < report.best_val_loss:
                report.best_val_loss, report.best_epoch = rec.val_loss, epoch
                best_state, since_best = model.state_dict(), 0
            else:
                since_best += 1
        report.epochs.append(rec)
        stop = rec.val_loss is not None and since_best > 0 and since_best >= config.patience
        log.info("%s epoch %d train %.5f val %s", label, epoch, rec.train_loss,
                 f"{rec.val_loss:.5f}" if rec.val_loss is not None else "-")
        if stop:
            report.stopped_early = epoch < config.epochs
            break

    model.load_state_dict(best_state)
    if test_ds is not None:
        report.test = json.loads(evaluate(model, test_ds, label).to_json())
    return report, model


# -- synthetic data ---------------------------------------------------------------

@dataclass(frozen=True)
class SyntheticSpec:
    """Field-aware click data with labels drawn from an FFM-form logit.

    ``noise`` scales logistic label noise: ``y = 1[logit + noise * L > 0]``
    with ``L ~ Logistic(0, 1)``, so ``noise=1`` gives
    ``y ~ Bernoulli(sigmoid(logit))`` and ``noise=0`` deterministic labels.

    Each field pair ``p`` contributes ``c_p * ((1 - a) * t_p + a * |t_p|)``
    where ``t_p = <v_{i,f_j}, v_{j,f_i}>``. The pair strengths ``c_p`` are
    log-normal with spread ``pair_scale_spread`` and ``a`` is
    ``pair_nonlinearity``; both default to 0, giving the plain FFM logit.
    """

    fields: int = 6
    cardinality: int = 50
    dim: int = 4
    noise: float = 1.0
    n_train: int = 50_000
    n_validation: int = 10_000
    n_test: int = 10_000
    seed: int = 0
    interaction_scale: float = 2.0
    linear_scale: float = 1.0
    bias: float = -0.5
    numeric_fields: int = 0
    pair_scale_spread: float = 0.0
    pair_nonlinearity: float = 0.0

    def __post_init__(self):
        if self.fields < 2 or self.cardinality < 1 or self.dim < 1:
            raise ConfigError(f"invalid synthetic spec {self}")
        if self.noise < 0:
            raise ConfigError("noise must be >= 0")
        if not 0.0 <= self.pair_nonlinearity <= 1.0:
            raise ConfigError("pair_nonlinearity must be in [0, 1]")


@dataclass
class GroundTruth:
    bias: float
    linear: np.ndarray
    field_embedding: np.ndarray
    pair_strength: np.ndarray
    noise: float
    logits: dict          # split -> logit per row
    bayes_logloss: dict   # split -> log-loss of the true probabilities

    def probabilities(self, split):
        z = self.logits[split]
        if self.noise == 0:
            return (z > 0).astype(float)
        return sigmoid(z / self.noise)


@dataclass
class SyntheticData:
    train: Dataset
    validation: Dataset
    test: Dataset
    truth: GroundTruth

    @property
    def splits(self):
        return self.train, self.validation, self.test


def synthetic_schema(spec: SyntheticSpec) -> FieldSchema:
    cats = [(f"c{t}", "categorical", spec.cardinality + 1) for t in range(spec.fields - spec.numeric_fields)]
    nums = [(f"n{t}", "numeric", 1) for t in range(spec.numeric_fields)]
    return FieldSchema.build(cats + nums, label_column="click")


def _mean_abs_pair_dot(schema, table):
    """Exact mean of ``|t_p|`` over uniformly drawn categorical values, per pair."""
    out = []
    for i, j in zip(*pair_order(schema.num_fields)):
        fi, fj = schema.fields[i], schema.fields[j]
        if fi.kind != "categorical" or fj.kind != "categorical":
            out.append(0.0)
            continue
        u = table[fi.index_base + 1:fi.index_base + fi.cardinality, j]
        v = table[fj.index_base + 1:fj.index_base + fj.cardinality, i]
        out.append(float(np.abs(u @ v.T).mean()))
    return np.array(out)


def gen_synthetic(spec: SyntheticSpec) -> SyntheticData:
    """Draw ground-truth parameters, then i.i.d. rows and labels for every split.

    Categorical values are uniform over slots ``1..cardinality`` (slot 0 is
    out-of-vocabulary); numeric values are uniform on ``[0, 1)``.
    """
    rng = np.random.default_rng(spec.seed)
    schema = synthetic_schema(spec)
    n, f, d = schema.num_features, schema.num_fields, spec.dim
    pairs = f * (f - 1) // 2
    emb_std = (spec.interaction_scale ** 2 / (pairs * d)) ** 0.25
    table = rng.normal(0.0, emb_std, size=(n, f, d))
    linear = rng.normal(0.0, spec.linear_scale / np.sqrt(f), size=n)
    strength = np.exp(spec.pair_scale_spread * rng.standard_normal(pairs))
    strength /= np.sqrt(np.mean(strength ** 2))
    alpha = spec.pair_nonlinearity
    abs_mean = _mean_abs_pair_dot(schema, table) if alpha > 0 else np.zeros(pairs)

    out, logits, bayes = {}, {}, {}
    for split, size in (("train", spec.n_train), ("validation", spec.n_validation), ("test", spec.n_test)):
        idx = np.empty((size, f), dtype=np.int64)
        val = np.ones((size, f))
        for t, fs in enumerate(schema.fields):
            if fs.kind == "numeric":
                idx[:, t] = fs.index_base
                val[:, t] = rng.random(size)
            else:
                idx[:, t] = fs.index_base + rng.integers(1, fs.cardinality, size=size)
        dots = FieldAwareInteraction("concat").products(table, idx, val).sum(axis=-1)   # [size, pairs]
        pair_terms = strength * ((1.0 - alpha) * dots + alpha * (np.abs(dots) - abs_mean))
        z = spec.bias + (linear[idx] * val).sum(axis=1) + pair_terms.sum(axis=1)
        u = rng.random(size)
        noise = np.log(u) - np.log1p(-u)
        y = (z + spec.noise * noise > 0).astype(np.int8)
        out[split] = Dataset(schema, idx, val, y, source=f"synthetic(seed={spec.seed})", split=split)
        logits[split] = z
        truth_p = sigmoid(z / spec.noise) if spec.noise > 0 else y.astype(float)
        bayes[split] = evaluate_predictions(truth_p, y).logloss
    truth = GroundTruth(spec.bias, linear, table, strength, spec.noise, logits, bayes)
    return SyntheticData(out["train"], out["validation"], out["test"], truth)


# -- gradient gate ----------------------------------------------------------------

def toy_schema(fields=3, cardinality=5) -> FieldSchema:
    return FieldSchema.build([(f"f{i}", "categorical", cardinality) for i in range(fields)])


def check_model_gradients(spec: ModelSpec, schema: FieldSchema | None = None, batch_size=8, seed=0,
                          step=1e-5, l2=1e-3):
    """Finite-difference check of a model's full training objective.

    Parameters are redrawn at unit scale so that gradients are far above
    round-off. Returns a :class:`~fnfm.nn.GradCheckReport`.
    """
    schema = schema or toy_schema()
    rng = np.random.default_rng(seed)
    model = build_model(spec, schema, seed, l2_linear=l2, l2_embedding=l2)
    for p in model.params.values():
        p[...] = rng.normal(0.0, 0.7, p.shape)
    idx = np.stack([rng.integers(fs.index_base, fs.index_base + fs.slots, batch_size)
                    for fs in schema.fields], axis=1)
    val = np.where([fs.kind == "numeric" for fs in schema.fields], rng.normal(size=idx.shape), 1.0)
    y = rng.integers(0, 2, batch_size)
    _, _, grads = model.loss_and_grad(idx, val, y)
    analytic = {k: densify(g, model.params[k].shape) for k, g in grads.items()}

    def objective():
        obj, _, _ = model.loss_and_grad(idx, val, y)
        return obj

    return grad_check(objective, model.params, analytic, step)


def toy_twin(spec: ModelSpec) -> ModelSpec:
    """The same model variant shrunk to gradient-check size."""
    return replace(spec, embedding_dim=2, hidden_layout=(4,) if spec.hidden_layout else ())


# -- studies ------------------------------------------------------------------------

GRAD_TOLERANCE = 1e-4


def _gate(spec: ModelSpec):
    rep = check_model_gradients(toy_twin(spec))
    if not rep.passed(GRAD_TOLERANCE):
        raise NumericError(f"gradient check failed for {spec}:\n{rep.format()}")
    return rep


def ablate_interaction_layer(config: TrainConfig, train_ds, val_ds, test_ds=None):
    """Train FNFM twice, differing only in concatenated vs pooled pair products."""
    if config.model.kind != "FNFM":
        raise ConfigError("interaction ablation needs an FNFM model spec")
    reports = {}
    for mode in ("concat", "pool"):
        cfg = replace(config, model=replace(config.model, interaction=mode))
        _gate(cfg.model)
        reports[mode], _ = train(cfg, train_ds, val_ds, test_ds, label=f"FNFM-{mode}")
    return reports["concat"], reports["pool"]


def ablate_batchnorm(config: TrainConfig, train_ds, val_ds, test_ds=None):
    """Train FNFM with and without BN on identical seeds."""
    if config.model.kind != "FNFM":
        raise ConfigError("batch-norm ablation needs an FNFM model spec")
    reports = {}
    for use_bn in (True, False):
        cfg = replace(config, model=replace(config.model, use_batchnorm=use_bn))
        _gate(cfg.model)
        reports[use_bn], _ = train(cfg, train_ds, val_ds, test_ds, label="FNFM-bn" if use_bn else "FNFM-nobn")
    return reports[True], reports[False]


def std_spread(stds) -> float:
    """Max/min ratio of per-dimension standard deviations."""
    stds = np.asarray(stds, dtype=float)
    return float(stds.max() / max(stds.min(), 1e-300))


def write_std_csv(path, reports):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["label", "epoch", "stage", "dim", "std"])
        for rep in reports:
            for rec in rep.epochs:
                for stage, stds in (("pre_bn", rec.mlp_input_std), ("post_bn", rec.mlp_input_std_bn)):
                    for dim, s in enumerate(stds or []):
                        w.writerow([rep.label, rec.epoch, stage, dim, repr(s)])


def write_curves_csv(path, reports):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["label", "epoch", "train_loss", "val_loss", "val_auc"])
        for rep in reports:
            for rec in rep.epochs:
                w.writerow([rep.label, rec.epoch, repr(rec.train_loss), repr(rec.val_loss), repr(rec.val_auc)])


@dataclass(frozen=True)
class GridConfig:
    models: tuple = ("LR", "FM", "FFM", "NFM", "DeepFM", "FNFM")
    embedding_dims: tuple = (4, 8, 16, 32, 64)
    fixed_dims: dict = field(default_factory=lambda: {"FFM": 4, "FNFM": 4})
    hidden_layouts: tuple = ((128, 128), (256, 256), (128, 128, 128), (256, 256, 256))
    optimizers: dict = field(default_factory=lambda: {
        "FM": {"kind": "adagrad", "lr": 0.1},
        "FFM": {"kind": "adagrad", "lr": 0.1},
        "default": {"kind": "adam", "lr": 1e-4},
    })
    model_overrides: dict = field(default_factory=dict)   # kind -> ModelSpec fields
    workers: int = 1

    def __post_init__(self):
        unknown = set(self.models) - set(KINDS)
        if unknown:
            raise ConfigError(f"grid: unknown model kinds {sorted(unknown)}")
        spec_fields = set(ModelSpec.__dataclass_fields__)
        for kind, override in self.model_overrides.items():
            bad = set(override) - spec_fields
            if kind not in KINDS or bad:
                raise ConfigError(f"grid.model_overrides[{kind!r}] is invalid (unknown fields {sorted(bad)})")
        if "default" not in self.optimizers:
            raise ConfigError("grid.optimizers needs a 'default' entry")
        if self.workers < 1:
            raise ConfigError("grid.workers must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "GridConfig":
        d = dict(d)
        for key in ("models", "embedding_dims"):
            if key in d:
                d[key] = tuple(d[key])
        if "hidden_layouts" in d:
            d["hidden_layouts"] = tuple(tuple(h) for h in d["hidden_layouts"])
        return cls(**d)

    def cells(self, base: TrainConfig):
        """Every ``(kind, TrainConfig)`` of the grid, in deterministic order."""
        for kind in self.models:
            dims = [None] if kind == "LR" else (
                [self.fixed_dims[kind]] if kind in self.fixed_dims else list(self.embedding_dims))
            layouts = list(self.hidden_layouts) if kind in ("NFM", "DeepFM", "FNFM") else [()]
            opt = OptimizerConfig(**self.optimizers.get(kind, self.optimizers["default"]))
            for dim in dims:
                for layout in layouts:
                    spec = replace(base.model, kind=kind, embedding_dim=dim or base.model.embedding_dim,
                                   hidden_layout=layout, interaction="concat",
                                   **self.model_overrides.get(kind, {}))
                    yield kind, replace(base, model=spec, optimizer=opt)


def _run_cell(args):
    cfg, train_ds, val_ds, test_ds = args
    report, _ = train(cfg, train_ds, val_ds, test_ds)
    m = cfg.model
    return {
        "model": m.kind,
        "hyperparams": {"embedding_dim": None if m.kind == "LR" else m.embedding_dim,
                        "hidden_layout": list(m.hidden_layout), "optimizer": asdict(cfg.optimizer)},
        "best_epoch": report.best_epoch,
        "val_logloss": report.best_val_loss,
        "test_logloss": report.test["logloss"] if report.test else None,
        "test_auc": report.test["auc"] if report.test else None,
    }


def compare_models(grid: GridConfig, base: TrainConfig, train_ds, val_ds, test_ds) -> dict:
    """Grid-search every model kind; pick each kind's cell by validation log-loss.

    Returns ``{"leaderboard": [...], "cells": [...]}``, leaderboard in grid order.
    """
    jobs = [(cfg, train_ds, val_ds, test_ds) for _, cfg in grid.cells(base)]
    if grid.workers > 1:
        with ProcessPoolExecutor(grid.workers) as pool:
            cells = list(pool.map(_run_cell, jobs))
    else:
        cells = [_run_cell(job) for job in jobs]
    leaderboard = []
    for kind in grid.models:
        mine = [c for c in cells if c["model"] == kind]
        leaderboard.append(min(mine, key=lambda c: c["val_logloss"]))
    return {"leaderboard": leaderboard, "cells": cells}


def save_leaderboard(board: dict, path):
    Path(path).write_text(json.dumps(board, indent=2) + "\n")


def load_leaderboard(path) -> dict:
    return json.loads(Path(path).read_text())
