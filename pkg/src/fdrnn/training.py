"""Training runs, random hyperparameter search, evaluation and checkpoints."""
from __future__ import annotations

import csv
import dataclasses
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import data as data_mod
from .gradients import backward_fd, backward_plain
from .losses import FIELD_COLUMNS, loss_field, per_sequence_nll, sequence_bce_nll
from .moments import TransferKind
from .network import DropoutConfig, RnnParams, forward_fd, forward_plain
from .optim import CLIP_THRESHOLD, InitSpec, RmsPropState, init_recurrent, rmsprop_nesterov_step, spectral_radius

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = "FDRNN1"
METRICS_COLUMNS = ("epoch", "step", "train_nll", "valid_nll", "spectral_radius", "wallclock_s")
_DTYPES = {"float32": np.float32, "float64": np.float64}


@dataclass
class RunConfig:
    hidden_units: int = 400
    transfer: str = "tanh"
    output_transfer: str = "sigmoid"
    model: str = "fd"  # "fd" or "plain"
    p_in: float = 0.9
    p_hid: float = 0.8
    p_out: float = 0.5
    fd_final_layer: bool = True
    step_rate: float = 0.001
    momentum: float = 0.99
    decay: float = 0.8
    init_sigma2_rec_out: float = 0.0001
    init_sigma2_in: float = 0.01
    rho_target: float = 1.2
    nu: int | None = 15
    b_y_const: float = -0.8
    chunk_len: int = data_mod.CHUNK_LEN
    batch_size: int = 64
    epochs: int = 100
    max_steps: int | None = None
    seed: int = 0
    precision: str = "float32"
    clip_threshold: float = CLIP_THRESHOLD
    log_interval: int = 1  # epochs between metric rows
    log_wallclock: bool = True
    mask_padding: bool = False

    def __post_init__(self):
        TransferKind.parse(self.transfer)
        if TransferKind.parse(self.output_transfer) is not TransferKind.SIGMOID:
            # the training objective is a Bernoulli likelihood
            raise ValueError("output_transfer must be 'sigmoid'")
        if self.model not in ("fd", "plain"):
            raise ValueError(f"model must be 'fd' or 'plain', got {self.model!r}")
        if self.precision not in _DTYPES:
            raise ValueError(f"precision must be one of {sorted(_DTYPES)}")
        if self.hidden_units < 1 or self.epochs < 0 or self.batch_size < 1 or self.log_interval < 1:
            raise ValueError("hidden_units, batch_size and log_interval must be positive, epochs >= 0")
        self.dropout  # validates keep probabilities

    @property
    def dropout(self) -> DropoutConfig:
        return DropoutConfig(self.p_in, self.p_hid, self.p_out, self.fd_final_layer)

    @property
    def dtype(self):
        return _DTYPES[self.precision]

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        return cls(**d)


# Configurations reported for the four music benchmarks (drop rates converted
# to keep probabilities).
REFERENCE_CONFIGS = {
    "piano-midi.de": dict(hidden_units=600, p_in=0.9, p_hid=0.7, p_out=1.0, fd_final_layer=False,
                          step_rate=0.005, momentum=0.995, decay=0.8, init_sigma2_rec_out=0.1,
                          init_sigma2_in=0.0001, rho_target=1.2, nu=25),
    "nottingham": dict(hidden_units=400, p_in=0.9, p_hid=0.6, p_out=1.0, fd_final_layer=True,
                       step_rate=0.001, momentum=0.99, decay=0.9, init_sigma2_rec_out=0.001,
                       init_sigma2_in=0.1, rho_target=1.2, nu=None),
    "musedata": dict(hidden_units=600, p_in=0.8, p_hid=0.7, p_out=1.0, fd_final_layer=True,
                     step_rate=0.0005, momentum=0.995, decay=0.9, init_sigma2_rec_out=0.1,
                     init_sigma2_in=0.0001, rho_target=1.2, nu=None),
    "jsbchorales": dict(hidden_units=400, p_in=0.9, p_hid=0.8, p_out=0.5, fd_final_layer=True,
                        step_rate=0.001, momentum=0.99, decay=0.8, init_sigma2_rec_out=0.0001,
                        init_sigma2_in=0.01, rho_target=1.2, nu=15),
}


@dataclass
class SearchSpace:
    """Finite candidate sets; every other RunConfig field comes from the base config."""

    hidden_units: list = field(default_factory=lambda: [200, 400, 600])
    transfer: list = field(default_factory=lambda: ["tanh"])
    p_in: list = field(default_factory=lambda: [1.0, 0.9, 0.8])
    p_hid: list = field(default_factory=lambda: [1.0, 0.9, 0.8, 0.7, 0.6, 0.5])
    p_out: list = field(default_factory=lambda: [1.0, 0.8, 0.5])
    fd_final_layer: list = field(default_factory=lambda: [True, False])
    step_rate: list = field(default_factory=lambda: [0.01, 0.005, 0.001, 0.0005, 0.0001, 0.00001])
    momentum: list = field(default_factory=lambda: [0.0, 0.9, 0.95, 0.99, 0.995])
    decay: list = field(default_factory=lambda: [0.8, 0.9])
    init_sigma2_rec_out: list = field(default_factory=lambda: [0.1, 0.01, 0.001, 0.0001])
    init_sigma2_in: list = field(default_factory=lambda: [0.1, 0.01, 0.001, 0.0001])
    rho_target: list = field(default_factory=lambda: [1.0, 1.05, 1.1, 1.2])
    nu: list = field(default_factory=lambda: [15, 25, 35, 50, None])
    b_y_const: list = field(default_factory=lambda: [-0.8])

    def __post_init__(self):
        for f in dataclasses.fields(self):
            if not getattr(self, f.name):
                raise ValueError(f"search space entry {f.name!r} is empty")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SearchSpace":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown search space fields: {sorted(unknown)}")
        return cls(**d)

    def sample(self, rng: np.random.Generator) -> dict:
        out = {}
        for f in dataclasses.fields(self):
            choices = getattr(self, f.name)
            out[f.name] = choices[int(rng.integers(len(choices)))]
        return out


@dataclass
class RunRecord:
    config: dict
    metrics: list = field(default_factory=list)
    best_valid_nll: float = float("inf")
    best_epoch: int = -1
    test_nll: float | None = None
    failed: bool = False
    error: str | None = None

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


# -- parameters and checkpoints ----------------------------------------------


def init_params(config: RunConfig, n_in: int, n_out: int, rng: np.random.Generator) -> RnnParams:
    H = config.hidden_units
    W_in = rng.normal(0.0, np.sqrt(config.init_sigma2_in), size=(n_in, H))
    W_rec = init_recurrent(InitSpec(config.rho_target, config.init_sigma2_rec_out, config.nu), H, rng)
    W_out = rng.normal(0.0, np.sqrt(config.init_sigma2_rec_out), size=(H, n_out))
    params = RnnParams(W_in, W_rec, W_out, np.zeros(H), np.full(n_out, config.b_y_const), np.zeros(H))
    return params.astype(config.dtype)


def save_checkpoint(path, params: RnnParams, config: RunConfig, rng_state: dict | None = None) -> None:
    doc = {
        "magic": CHECKPOINT_MAGIC,
        "config": config.to_dict(),
        "dtype": config.precision,
        "params": params.to_dict(),
        "rng_state": rng_state,
    }
    Path(path).write_text(json.dumps(doc, sort_keys=True), encoding="utf-8")


def load_checkpoint(path) -> tuple[RnnParams, RunConfig, dict | None]:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("magic") != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (magic {doc.get('magic')!r})")
    config = RunConfig.from_dict(doc["config"])
    params = RnnParams.from_dict(doc["params"], dtype=_DTYPES[doc["dtype"]])
    return params, config, doc.get("rng_state")


# -- evaluation ----------------------------------------------------------------


def predict(params: RnnParams, config: RunConfig, inputs: np.ndarray) -> np.ndarray:
    if config.model == "plain":
        return forward_plain(params, config.transfer, config.output_transfer, inputs)
    return forward_fd(params, config.dropout, config.transfer, config.output_transfer, inputs)


def chunk_nll(params: RnnParams, config: RunConfig, chunks: np.ndarray, batch_size: int = 256) -> float:
    """Mean next-step NLL over equal-length chunks."""
    total = 0.0
    for i in range(0, len(chunks), batch_size):
        part = chunks[i:i + batch_size]
        total += sequence_bce_nll(predict(params, config, part), part) * len(part)
    return total / len(chunks)


def evaluate_params(params: RnnParams, config: RunConfig, sequences: list) -> float:
    """Per-step NLL over unsplit sequences (each scored whole, then averaged)."""
    dtype = params.dtype
    outputs = [predict(params, config, np.asarray(s, dtype=dtype)[None])[0] for s in sequences]
    return per_sequence_nll(outputs, [np.asarray(s, dtype=dtype) for s in sequences])


def evaluate(checkpoint, dataset: data_mod.PianoRollDataset, split: str) -> float:
    params, config, _ = load_checkpoint(checkpoint)
    return evaluate_params(params, config, dataset.binary(split))


# -- training ------------------------------------------------------------------


def _fmt(x) -> str:
    return repr(float(x))


class _MetricsWriter:
    def __init__(self, path: Path | None):
        self.path = path
        if path is not None:
            with path.open("w", newline="") as fh:
                csv.writer(fh).writerow(METRICS_COLUMNS)

    def write(self, row: dict) -> None:
        if self.path is None:
            return
        with self.path.open("a", newline="") as fh:
            csv.writer(fh).writerow(
                [row["epoch"], row["step"]] + [_fmt(row[c]) for c in METRICS_COLUMNS[2:]])


def train(config: RunConfig, dataset: data_mod.PianoRollDataset, out_dir=None,
          on_step: Callable[[int, np.ndarray, float], None] | None = None) -> RunRecord:
    """Train one model; writes ``metrics.csv``, ``checkpoint.json`` and
    ``record.json`` into ``out_dir`` when given.

    The checkpoint holds the parameters with the lowest validation NLL.  A
    non-finite loss or update stops the run and marks it failed; the best
    checkpoint so far is kept.
    """
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    dtype = config.dtype
    rng = np.random.default_rng(config.seed)
    train_chunks = data_mod.chunk_split(dataset.binary("train"), config.chunk_len)
    valid_chunks = data_mod.chunk_split(dataset.binary("valid"), config.chunk_len)
    x_train = train_chunks.data.astype(dtype)
    x_valid = valid_chunks.data.astype(dtype)
    train_mask = train_chunks.valid_mask() if config.mask_padding else None

    params = init_params(config, dataset.dims, dataset.dims, rng)
    template = params
    theta = params.flatten()
    state = RmsPropState(config.step_rate, config.decay, config.momentum,
                         clip_threshold=config.clip_threshold)
    dropout = config.dropout
    f_h, f_y = config.transfer, config.output_transfer

    def grad_fn(batch_idx):
        x = x_train[batch_idx]
        mask = None if train_mask is None else train_mask[batch_idx]

        def fn(th):
            p = template.unflatten(th)
            if config.model == "plain":
                loss, g = backward_plain(p, f_h, f_y, x, x, mask=mask)
            else:
                loss, g = backward_fd(p, dropout, f_h, f_y, x, x, mask=mask)
            return loss, g.flatten()
        return fn

    record = RunRecord(config=config.to_dict())
    writer = _MetricsWriter(out_dir / "metrics.csv" if out_dir is not None else None)
    start = time.perf_counter()
    best_theta = theta.copy()

    def safe_nll(p, x):
        try:
            return chunk_nll(p, config, x)
        except FloatingPointError:
            return float("nan")

    def log_row(epoch, step, th):
        p = template.unflatten(th)
        row = {
            "epoch": epoch,
            "step": step,
            "train_nll": safe_nll(p, x_train),
            "valid_nll": safe_nll(p, x_valid),
            "spectral_radius": spectral_radius(p.W_rec) if np.all(np.isfinite(p.W_rec)) else float("nan"),
            "wallclock_s": time.perf_counter() - start if config.log_wallclock else 0.0,
        }
        record.metrics.append(row)
        writer.write(row)
        log.info("epoch %d step %d train %.4f valid %.4f rho %.3f", epoch, step,
                 row["train_nll"], row["valid_nll"], row["spectral_radius"])
        return row

    def consider(row, epoch, th):
        nonlocal best_theta
        if np.isfinite(row["valid_nll"]) and row["valid_nll"] < record.best_valid_nll:
            record.best_valid_nll = row["valid_nll"]
            record.best_epoch = epoch
            best_theta = th.copy()

    def finite(row):
        return bool(np.isfinite(row["train_nll"]) and np.isfinite(row["valid_nll"]))

    step = 0
    row = log_row(0, step, theta)
    consider(row, 0, theta)
    done = not finite(row)
    if done:
        record.failed = True
        record.error = "epoch 0: non-finite loss at initialisation"
    for epoch in range(1, config.epochs + 1):
        if done:
            break
        try:
            for idx in data_mod.minibatches(len(x_train), config.batch_size, rng):
                theta, (loss, _) = rmsprop_nesterov_step(state, theta, grad_fn(idx))
                step += 1
                if on_step is not None:
                    on_step(step, theta, loss)
                if config.max_steps is not None and step >= config.max_steps:
                    done = True
                    break
        except FloatingPointError as exc:
            record.failed = True
            record.error = f"epoch {epoch} step {step}: {exc}"
            log.warning("run diverged: %s", record.error)
            break
        if epoch % config.log_interval == 0 or done or epoch == config.epochs:
            row = log_row(epoch, step, theta)
            if not finite(row):
                record.failed = True
                record.error = f"epoch {epoch}: non-finite loss"
                break
            consider(row, epoch, theta)
        if done:
            break

    best = template.unflatten(best_theta)
    if out_dir is not None:
        save_checkpoint(out_dir / "checkpoint.json", best, config, rng.bit_generator.state)
        (out_dir / "record.json").write_text(json.dumps(record.to_dict(), sort_keys=True), encoding="utf-8")
    record.params = best
    return record


# -- random search ---------------------------------------------------------------


def run_seed(master_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([master_seed, index]).generate_state(1)[0])


def sample_configs(space: SearchSpace, n_runs: int, master_seed: int, base: RunConfig | None = None) -> list:
    """``n_runs`` configurations drawn independently and uniformly from ``space``."""
    if n_runs < 1:
        raise ValueError("n_runs must be at least 1")
    base = base or RunConfig()
    rng = np.random.default_rng(master_seed)
    configs = []
    for i in range(n_runs):
        d = base.to_dict()
        d.update(space.sample(rng))
        d["seed"] = run_seed(master_seed, i)
        configs.append(RunConfig.from_dict(d))
    return configs


def _train_job(args):
    config, dataset, out_dir = args
    record = train(config, dataset, out_dir)
    record.__dict__.pop("params", None)
    return record


def select_best(records: list) -> int | None:
    """Index of the lowest validation NLL among successful runs; ties go to the earliest."""
    best = None
    for i, r in enumerate(records):
        if r.failed or not np.isfinite(r.best_valid_nll):
            continue
        if best is None or r.best_valid_nll < records[best].best_valid_nll:
            best = i
    return best


def random_search(space: SearchSpace, n_runs: int, dataset: data_mod.PianoRollDataset, master_seed: int,
                  out_dir=None, base: RunConfig | None = None, workers: int = 1):
    """Train ``n_runs`` sampled configurations and pick the best on validation.

    Only the selected run is evaluated on the (unsplit) test sequences.
    Returns ``(best_index, records)``.
    """
    configs = sample_configs(space, n_runs, master_seed, base)
    out_dir = Path(out_dir) if out_dir is not None else None
    dirs = [out_dir / f"run{i:03d}" if out_dir is not None else None for i in range(n_runs)]
    jobs = list(zip(configs, [dataset] * n_runs, dirs))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(_train_job, jobs))
    else:
        records = [_train_job(j) for j in jobs]
    best = select_best(records)
    if best is None:
        raise RuntimeError(f"all {n_runs} runs failed")
    if dirs[best] is not None:
        records[best].test_nll = evaluate(dirs[best] / "checkpoint.json", dataset, "test")
    else:
        # no files: retrain deterministically to recover the selected parameters
        rec = train(configs[best], dataset)
        records[best].test_nll = evaluate_params(rec.params, configs[best], dataset.binary("test"))
    if out_dir is not None:
        summary = {"best_index": best, "master_seed": master_seed,
                   "records": [r.to_dict() for r in records]}
        (out_dir / "search.json").write_text(json.dumps(summary, sort_keys=True), encoding="utf-8")
    return best, records


# -- loss-field export -------------------------------------------------------------

DEFAULT_MEAN_GRID = np.linspace(-3.0, 3.0, 61)
DEFAULT_VAR_GRID = np.linspace(0.05, 3.0, 60)


def export_field(kind, target: float = 0.2, mean_grid=None, var_grid=None, out_path=None) -> np.ndarray:
    mean_grid = DEFAULT_MEAN_GRID if mean_grid is None else mean_grid
    var_grid = DEFAULT_VAR_GRID if var_grid is None else var_grid
    table = loss_field(kind, target, mean_grid, var_grid)
    if out_path is not None:
        with Path(out_path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(FIELD_COLUMNS)
            for row in table:
                w.writerow([_fmt(v) for v in row])
    return table


def read_csv(path) -> tuple[list, np.ndarray]:
    with Path(path).open(newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], np.array([[float(v) for v in r] for r in rows[1:]])
