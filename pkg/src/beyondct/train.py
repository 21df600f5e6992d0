"""Cohort ingestion, subject-level splitting, Adam training with
best-checkpoint selection, checkpoint serialization, and the
demographics-only linear regression baseline.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor, backward
from .augment import AugmentConfig, apply_plan, sample_plan
from .errors import ConfigError, ContractError, FormatError, TrainingError
from .model import (
    DemographicsRecord,
    ModelConfig,
    forward,
    init_params,
    mae_loss,
    stack_predictions,
)
from .util import canonical_json, round_half_up, stable_seed
from .volume import NORM255, Volume, load_volume

CHECKPOINT_MAGIC = b"BCTK"
CHECKPOINT_VERSION = 1

MANIFEST_COLUMNS = (
    "subject_id", "scan_id", "volume_path", "age", "sex", "height_in",
    "weight_lb", "smoking_status", "cigs_per_day", "smoke_years",
    "fvc_l", "fev1_l",
)


@dataclass(frozen=True)
class PftRecord:
    """One spirometry measurement pair, in liters."""

    fvc_l: float
    fev1_l: float

    def __post_init__(self) -> None:
        if not (np.isfinite(self.fvc_l) and np.isfinite(self.fev1_l)):
            raise ContractError(f"lung function values must be finite, got {self}")
        if not 0 < self.fev1_l <= self.fvc_l:
            raise ContractError(
                f"need 0 < FEV1 <= FVC, got FEV1={self.fev1_l} FVC={self.fvc_l}"
            )

    def value(self, target: str) -> float:
        return self.fvc_l if target == "FVC" else self.fev1_l


@dataclass(frozen=True)
class CohortSample:
    subject_id: str
    scan_id: str
    volume_path: str
    demographics: DemographicsRecord
    pft: PftRecord

    def __post_init__(self) -> None:
        if not self.subject_id:
            raise ContractError("subject_id must be non-empty")
        if not self.scan_id:
            raise ContractError("scan_id must be non-empty")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 2
    epochs: int = 100
    seed: int = 0
    split_fractions: tuple[float, float, float] = (0.80, 0.10, 0.10)

    def __post_init__(self) -> None:
        problems = []
        if self.lr <= 0:
            problems.append(f"lr must be positive, got {self.lr}")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            problems.append("adam betas must lie in (0, 1)")
        if self.eps <= 0:
            problems.append("adam eps must be positive")
        if self.batch_size < 1:
            problems.append(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 0:
            problems.append(f"epochs must be >= 0, got {self.epochs}")
        if len(self.split_fractions) != 3 or any(f < 0 for f in self.split_fractions):
            problems.append("split_fractions must be three values >= 0")
        elif abs(sum(self.split_fractions) - 1.0) > 1e-9:
            problems.append(f"split_fractions must sum to 1, got {sum(self.split_fractions)}")
        if problems:
            raise ConfigError("; ".join(problems))


# ---------------------------------------------------------------------------
# manifest CSV


def load_manifest(path: str | Path) -> list[CohortSample]:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise FormatError(f"cannot read manifest {path}: {exc}") from exc
    reader = csv.DictReader(text.splitlines())
    header = reader.fieldnames or []
    missing = [c for c in MANIFEST_COLUMNS if c not in header]
    if missing:
        raise FormatError(f"manifest {path} missing columns: {', '.join(missing)}")
    samples = []
    for rownum, row in enumerate(reader, start=2):
        try:
            demo = DemographicsRecord(
                age=float(row["age"]),
                sex=int(row["sex"]),
                height_in=float(row["height_in"]),
                weight_lb=float(row["weight_lb"]),
                smoking_status=int(row["smoking_status"]),
                cigs_per_day=float(row["cigs_per_day"]),
                smoke_years=float(row["smoke_years"]),
            )
            pft = PftRecord(fvc_l=float(row["fvc_l"]), fev1_l=float(row["fev1_l"]))
            samples.append(
                CohortSample(row["subject_id"], row["scan_id"], row["volume_path"], demo, pft)
            )
        except (ValueError, ContractError) as exc:
            raise FormatError(f"manifest {path} row {rownum}: {exc}") from exc
    return samples


def save_manifest(samples: list[CohortSample], path: str | Path) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_COLUMNS)
        for s in samples:
            d = s.demographics
            writer.writerow([
                s.subject_id, s.scan_id, s.volume_path,
                d.age, d.sex, d.height_in, d.weight_lb,
                d.smoking_status, d.cigs_per_day, d.smoke_years,
                s.pft.fvc_l, s.pft.fev1_l,
            ])


# ---------------------------------------------------------------------------
# splitting


def split_subjects(
    samples: list[CohortSample],
    fractions: tuple[float, float, float] = (0.80, 0.10, 0.10),
    seed: int = 0,
) -> dict[str, list[CohortSample]]:
    """Partition by subject so no subject's scans straddle two splits.

    Validation and test sizes are round(fraction * n_subjects); the
    remainder goes to train.
    """
    if not samples:
        raise ContractError("cannot split an empty cohort")
    if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ContractError(f"split fractions must be >= 0 and sum to 1, got {fractions}")
    subjects = sorted({s.subject_id for s in samples})
    order = np.random.default_rng(seed).permutation(len(subjects))
    shuffled = [subjects[i] for i in order]
    n = len(subjects)
    n_val = round_half_up(fractions[1] * n)
    n_test = round_half_up(fractions[2] * n)
    n_train = n - n_val - n_test
    if n_train < 0:
        raise ContractError(f"rounded val+test counts exceed cohort size {n}")
    assignment: dict[str, str] = {}
    for sid in shuffled[:n_train]:
        assignment[sid] = "train"
    for sid in shuffled[n_train : n_train + n_val]:
        assignment[sid] = "val"
    for sid in shuffled[n_train + n_val :]:
        assignment[sid] = "test"
    out: dict[str, list[CohortSample]] = {"train": [], "val": [], "test": []}
    for s in samples:
        out[assignment[s.subject_id]].append(s)
    return out


# ---------------------------------------------------------------------------
# optimizer


class Adam:
    """Adam with bias correction; eps sits outside the square root."""

    def __init__(self, params: dict[str, Tensor], lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in params.items()}

    def step(self) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            elif not np.isfinite(g).all():
                raise TrainingError(f"non-finite gradient in {name!r} at step {self.t}")
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            m_hat = self.m[name] / bc1
            v_hat = self.v[name] / bc2
            p.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    """Self-describing snapshot: config, tensors, epoch, validation MAE."""

    model_config: ModelConfig
    tensors: dict[str, np.ndarray]
    epoch: int
    val_mae: float
    version: int = CHECKPOINT_VERSION

    def to_params(self) -> dict[str, Tensor]:
        return {
            name: Tensor(arr.copy(), requires_grad=True, name=name)
            for name, arr in self.tensors.items()
        }


def model_config_to_dict(cfg: ModelConfig) -> dict:
    return dataclasses.asdict(cfg)


def model_config_from_dict(d: dict) -> ModelConfig:
    kwargs = dict(d)
    for key in ("stem_channels", "head_hidden"):
        if key in kwargs:
            kwargs[key] = tuple(kwargs[key])
    return ModelConfig(**kwargs)


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    header = {
        "format_version": ckpt.version,
        "model_config": model_config_to_dict(ckpt.model_config),
        "epoch": int(ckpt.epoch),
        "val_mae": float(ckpt.val_mae),
        "tensors": [
            {"name": name, "shape": list(arr.shape)} for name, arr in ckpt.tensors.items()
        ],
    }
    blob = canonical_json(header).encode("utf-8")
    with Path(path).open("wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", ckpt.version))
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for arr in ckpt.tensors.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < 16 or blob[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint file")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    (header_len,) = struct.unpack_from("<Q", blob, 8)
    header_end = 16 + header_len
    if len(blob) < header_end:
        raise FormatError(f"{path}: truncated checkpoint header")
    try:
        header = json.loads(blob[16:header_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: corrupt checkpoint header: {exc}") from exc
    cfg = model_config_from_dict(header["model_config"])
    tensors: dict[str, np.ndarray] = {}
    offset = header_end
    for entry in header["tensors"]:
        shape = tuple(int(d) for d in entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        end = offset + count * 4
        if len(blob) < end:
            raise FormatError(f"{path}: truncated payload for tensor {entry['name']!r}")
        tensors[entry["name"]] = (
            np.frombuffer(blob[offset:end], dtype="<f4").reshape(shape).copy()
        )
        offset = end
    if offset != len(blob):
        raise FormatError(f"{path}: {len(blob) - offset} trailing bytes after payloads")
    expected = {name: t.shape for name, t in init_params(cfg, seed=0).items()}
    actual = {name: arr.shape for name, arr in tensors.items()}
    if expected != actual:
        diffs = sorted(
            set(expected.items()) ^ set(actual.items()), key=lambda kv: kv[0]
        )
        raise FormatError(
            f"{path}: tensor shapes do not match the stored model config: {diffs[:4]}"
        )
    return Checkpoint(cfg, tensors, int(header["epoch"]), float(header["val_mae"]), version)


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    best: Checkpoint
    checkpoint_path: Path
    log_path: Path
    history: list[dict]


def load_volumes(
    samples: list[CohortSample], cfg: ModelConfig, root: Path | None = None
) -> dict[str, Volume]:
    """Read and validate every referenced volume once, keyed by path."""
    cache: dict[str, Volume] = {}
    for s in samples:
        if s.volume_path in cache:
            continue
        path = Path(s.volume_path)
        if root is not None and not path.is_absolute():
            path = root / path
        try:
            vol = load_volume(path)
        except OSError as exc:
            raise FormatError(f"cannot load volume for scan {s.scan_id}: {exc}") from exc
        n = cfg.input_cube
        if vol.dims != (n, n, n) or vol.intensity != NORM255:
            raise ContractError(
                f"volume {path} for scan {s.scan_id} is not a normalized {n}-cube "
                f"(dims {vol.dims}, intensity {vol.intensity}); run preprocessing first"
            )
        cache[s.volume_path] = vol
    return cache


def evaluate_mae(
    params: dict[str, Tensor],
    cfg: ModelConfig,
    samples: list[CohortSample],
    volumes: dict[str, Volume],
) -> float:
    """Mean absolute error in liters over unaugmented samples."""
    errors = []
    for s in samples:
        pred = float(forward(volumes[s.volume_path], s.demographics, params, cfg).data.reshape(()))
        errors.append(abs(pred - s.pft.value(cfg.target)))
    return float(np.mean(errors))


def train(
    samples: list[CohortSample],
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    aug_cfg: AugmentConfig | None,
    workdir: str | Path,
    volume_root: Path | None = None,
    splits: dict[str, list[CohortSample]] | None = None,
    log_timing: bool = True,
) -> TrainResult:
    """Full training loop: shuffled batches with per-sample augmentation,
    per-epoch validation, and retention of the lowest-validation-MAE
    checkpoint. When the validation split is empty, the unaugmented train
    set stands in for checkpoint selection.

    ``log_timing=False`` records 0.0 for per-epoch wall time so that
    deterministic runs produce byte-identical logs.
    """
    workdir = Path(workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    if splits is None:
        splits = split_subjects(samples, train_cfg.split_fractions, train_cfg.seed)
    train_set = splits["train"]
    val_set = splits["val"] if splits["val"] else train_set
    if not train_set:
        raise ContractError("training split is empty")

    volumes = load_volumes(train_set + val_set, model_cfg, volume_root)
    params = init_params(model_cfg, train_cfg.seed)
    optimizer = Adam(params, train_cfg.lr, train_cfg.beta1, train_cfg.beta2, train_cfg.eps)

    checkpoint_path = workdir / "best.ckpt"
    log_path = workdir / "epochs.jsonl"
    history: list[dict] = []

    def snapshot(epoch: int, val_mae: float) -> Checkpoint:
        tensors = {name: p.data.astype("<f4", copy=True) for name, p in params.items()}
        return Checkpoint(model_cfg, tensors, epoch, val_mae)

    best = snapshot(0, evaluate_mae(params, model_cfg, val_set, volumes))
    save_checkpoint(best, checkpoint_path)

    with log_path.open("w", encoding="utf-8") as log:
        for epoch in range(1, train_cfg.epochs + 1):
            start = time.monotonic()
            order_rng = np.random.default_rng(stable_seed(train_cfg.seed, "order", epoch))
            order = order_rng.permutation(len(train_set))
            epoch_abs_err = 0.0
            for b0 in range(0, len(order), train_cfg.batch_size):
                batch = [train_set[i] for i in order[b0 : b0 + train_cfg.batch_size]]
                tape = Tape()
                with tape:
                    preds = []
                    targets = []
                    for s in batch:
                        vol = volumes[s.volume_path]
                        if aug_cfg is not None:
                            plan = sample_plan(
                                aug_cfg,
                                stable_seed(train_cfg.seed, s.subject_id, s.scan_id, epoch),
                            )
                            vol = apply_plan(vol, plan)
                        preds.append(forward(vol, s.demographics, params, model_cfg))
                        targets.append(s.pft.value(model_cfg.target))
                    loss = mae_loss(stack_predictions(preds), np.array(targets))
                loss_value = loss.item()
                if not np.isfinite(loss_value):
                    raise TrainingError(f"non-finite loss at epoch {epoch}")
                backward(loss, tape)
                optimizer.step()
                optimizer.zero_grad()
                epoch_abs_err += loss_value * len(batch)

            train_loss = epoch_abs_err / len(train_set)
            val_mae = evaluate_mae(params, model_cfg, val_set, volumes)
            seconds = (time.monotonic() - start) if log_timing else 0.0
            record = {
                "epoch": epoch,
                "train_loss": round(train_loss, 6),
                "val_mae": round(val_mae, 6),
                "seconds": round(seconds, 3),
            }
            history.append(record)
            log.write(json.dumps(record, sort_keys=True) + "\n")
            log.flush()
            if val_mae < best.val_mae:
                best = snapshot(epoch, val_mae)
                save_checkpoint(best, checkpoint_path)

    return TrainResult(best, checkpoint_path, log_path, history)


# ---------------------------------------------------------------------------
# demographics-only baseline


@dataclass(frozen=True)
class LinearBaseline:
    """OLS fit of the target on the 7 raw demographics plus an intercept."""

    coef: np.ndarray  # (7,)
    intercept: float
    target: str
    rank_deficient: bool

    def predict(self, demo: DemographicsRecord) -> float:
        return float(demo.as_vector() @ self.coef + self.intercept)


def fit_linear_baseline(samples: list[CohortSample], target: str) -> LinearBaseline:
    if target not in ("FVC", "FEV1"):
        raise ContractError(f"unknown target {target!r}")
    if len(samples) < 8:
        raise ContractError(
            f"need at least 8 samples to fit 7 coefficients + intercept, got {len(samples)}"
        )
    x = np.stack([s.demographics.as_vector() for s in samples])
    design = np.column_stack([x, np.ones(len(samples))])
    y = np.array([s.pft.value(target) for s in samples])
    theta, _, rank, _ = np.linalg.lstsq(design, y, rcond=None)
    return LinearBaseline(
        coef=theta[:7], intercept=float(theta[7]), target=target,
        rank_deficient=rank < design.shape[1],
    )
