"""Training loop, evaluation metrics and checkpoint files."""
from __future__ import annotations

import copy
import hashlib
import json
import logging
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch

from .data import RegionGraph
from .exceptions import ConfigError, IntegrityError, LengthError, ShapeError, VersionError
from .model import ModelConfig, ODformer
from .tensor import DTYPE

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"ODFCKPT\x00"
CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 16
    max_epochs: int = 100
    early_stop_patience: int | None = 8
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    shuffle_seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0 or self.batch_size < 1 or self.max_epochs < 0:
            raise ConfigError("learning_rate and batch_size must be positive, max_epochs nonnegative")
        if self.early_stop_patience is not None and self.early_stop_patience < 1:
            raise ConfigError("early_stop_patience must be positive (or null to disable)")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class Checkpoint:
    config: dict
    params: dict
    optimizer_state: dict = field(default_factory=dict)
    epoch: int = 0
    val_loss: float = float("nan")
    train_config: dict = field(default_factory=dict)
    graphs: dict = field(default_factory=dict)
    history: dict = field(default_factory=dict)

    def build_model(self) -> ODformer:
        cfg = ModelConfig.from_dict(self.config)
        og = RegionGraph(np.asarray(self.graphs["origin"])) if "origin" in self.graphs else None
        dg = RegionGraph(np.asarray(self.graphs["destination"])) if "destination" in self.graphs else None
        model = ODformer(cfg, og, dg)
        state = {k: torch.from_numpy(v.copy()) for k, v in self.params.items()}
        model.load_state_dict(state)
        return model


# --- windows and metrics -------------------------------------------------------


def training_windows(length: int, i: int, o: int) -> np.ndarray:
    """Start indices of every (history, target) window, stride 1."""
    n = length - (i + o) + 1
    return np.arange(max(n, 0))


def evaluation_windows(context: int, length: int, i: int, o: int) -> np.ndarray:
    """Non-overlapping target blocks inside ``[context, length)``; history may reach into the context."""
    starts = np.arange(context, length - o + 1, o) - i
    return starts[starts >= 0]


def make_batch(values: np.ndarray, starts, i: int, o: int):
    x = np.stack([values[s:s + i] for s in starts])
    y = np.stack([values[s + i:s + i + o] for s in starts])
    return torch.from_numpy(x), torch.from_numpy(y)


def evaluate(pred, truth, denormalize: bool = False):
    """(MSE, MAE) over every timestep and entry."""
    p = np.asarray(pred.detach() if isinstance(pred, torch.Tensor) else pred, dtype=np.float64)
    t = np.asarray(truth.detach() if isinstance(truth, torch.Tensor) else truth, dtype=np.float64)
    if p.shape != t.shape:
        raise ShapeError(f"prediction shape {p.shape} != truth shape {t.shape}")
    if denormalize:
        p, t = np.expm1(p), np.expm1(t)
    d = p - t
    return float(np.mean(d * d)), float(np.mean(np.abs(d)))


def persistence_forecast(history, o: int) -> np.ndarray:
    """Repeat the last observed matrix over the horizon; works batched or unbatched."""
    h = np.asarray(history, dtype=np.float64)
    last = h[..., -1:, :, :, :]
    reps = [1] * h.ndim
    reps[-4] = o
    return np.tile(last, reps)


@torch.no_grad()
def predict_windows(model: ODformer, values: np.ndarray, starts, batch_size: int = 64):
    c = model.config
    preds, truths, periods = [], [], []
    for k in range(0, len(starts), batch_size):
        x, y = make_batch(values, starts[k:k + batch_size], c.input_length, c.output_length)
        preds.append(model(x).numpy())
        truths.append(y.numpy())
        periods.extend(ps.to_dict() for ps in model.last_periods)
    if not preds:
        return None, None, []
    return np.concatenate(preds), np.concatenate(truths), periods


def validation_loss(model: ODformer, values: np.ndarray, starts) -> float:
    p, t, _ = predict_windows(model, values, starts)
    if p is None:
        return float("nan")
    return evaluate(p, t)[0]


# --- training ------------------------------------------------------------------


def _adam(model: ODformer, tc: TrainConfig):
    return torch.optim.Adam(model.parameters(), lr=tc.learning_rate, betas=(tc.beta1, tc.beta2), eps=tc.adam_eps)


def snapshot(model: ODformer, optimizer=None, epoch: int = 0, val_loss: float = float("nan"),
             tc: TrainConfig | None = None, history: dict | None = None) -> Checkpoint:
    params = {k: v.detach().numpy().copy() for k, v in model.state_dict().items()}
    opt = {}
    if optimizer is not None:
        names = {id(p): n for n, p in model.named_parameters()}
        for group in optimizer.param_groups:
            for p in group["params"]:
                st = optimizer.state.get(p)
                if not st:
                    continue
                n = names[id(p)]
                opt[f"{n}.exp_avg"] = st["exp_avg"].detach().numpy().copy()
                opt[f"{n}.exp_avg_sq"] = st["exp_avg_sq"].detach().numpy().copy()
                opt[f"{n}.step"] = np.asarray([float(st["step"])])
    return Checkpoint(
        config=model.config.to_dict(),
        params=params,
        optimizer_state=opt,
        epoch=epoch,
        val_loss=float(val_loss),
        train_config=asdict(tc) if tc else {},
        graphs={"origin": model.origin_graph.adjacency.tolist(), "destination": model.destination_graph.adjacency.tolist()},
        history=copy.deepcopy(history or {}),
    )


def restore_optimizer(model: ODformer, optimizer, state: dict) -> None:
    for n, p in model.named_parameters():
        if f"{n}.exp_avg" not in state:
            continue
        optimizer.state[p] = {
            "step": torch.tensor(state[f"{n}.step"][0], dtype=torch.float32),
            "exp_avg": torch.from_numpy(state[f"{n}.exp_avg"].copy()),
            "exp_avg_sq": torch.from_numpy(state[f"{n}.exp_avg_sq"].copy()),
        }


def train(model: ODformer, train_values, val_values, tc: TrainConfig, val_context=None, callback=None) -> Checkpoint:
    """Fit ``model`` on normalized ``[T, N, N', F]`` arrays; returns the best-validation checkpoint.

    Training windows slide with stride 1 inside ``train_values``. Validation
    targets are non-overlapping blocks of ``val_values``; ``val_context`` (for
    example the tail of the training data) may supply their history.
    ``callback(epoch, train_loss, val_loss)`` is called after every epoch.
    """
    c = model.config
    i, o = c.input_length, c.output_length
    train_values = np.asarray(train_values, dtype=np.float64)
    starts = training_windows(len(train_values), i, o)
    if len(starts) == 0:
        raise LengthError(f"training data of length {len(train_values)} has no window of length {i + o}")
    ctx = np.asarray(val_context, dtype=np.float64) if val_context is not None else train_values[:0]
    val_all = np.concatenate([ctx, np.asarray(val_values, dtype=np.float64)])
    val_starts = evaluation_windows(len(ctx), len(val_all), i, o)

    rng = np.random.default_rng(tc.shuffle_seed)
    optimizer = _adam(model, tc)
    history = {"train_loss": [], "val_loss": []}

    model.eval()
    best_val = validation_loss(model, val_all, val_starts)
    best = snapshot(model, optimizer, 0, best_val, tc, history)
    history["initial_val_loss"] = best_val
    stale = 0
    for epoch in range(1, tc.max_epochs + 1):
        model.train()
        order = rng.permutation(starts)
        total = 0.0
        for k in range(0, len(order), tc.batch_size):
            x, y = make_batch(train_values, order[k:k + tc.batch_size], i, o)
            optimizer.zero_grad(set_to_none=False)
            loss = torch.mean((model(x) - y) ** 2)
            loss.backward()
            optimizer.step()
            total += loss.item() * len(x)
        train_loss = total / len(order)
        model.eval()
        val = validation_loss(model, val_all, val_starts)
        history["train_loss"].append(train_loss)
        history["val_loss"].append(val)
        log.info("epoch %d train %.6f val %.6f", epoch, train_loss, val)
        if callback is not None:
            callback(epoch, train_loss, val)
        # without validation windows the training loss drives early stopping
        score = val if not np.isnan(val) else train_loss
        ref = best.val_loss if not np.isnan(best.val_loss) else np.inf
        if score < ref:
            best = snapshot(model, optimizer, epoch, score, tc, history)
            stale = 0
        else:
            stale += 1
            if tc.early_stop_patience is not None and stale >= tc.early_stop_patience:
                break
    best.history = copy.deepcopy(history)
    return best


# --- checkpoint files ----------------------------------------------------------


def save_checkpoint(c: Checkpoint, path) -> Path:
    """Magic, u64 header length, JSON header, raw float64 little-endian payload."""
    manifest, chunks, offset = [], [], 0
    for section, tensors in (("params", c.params), ("optimizer", c.optimizer_state)):
        for name, arr in tensors.items():
            a = np.ascontiguousarray(arr, dtype="<f8")
            raw = a.tobytes()
            manifest.append({"section": section, "name": name, "shape": list(a.shape), "offset": offset, "nbytes": len(raw)})
            chunks.append(raw)
            offset += len(raw)
    payload = b"".join(chunks)
    header = {
        "format_version": CHECKPOINT_VERSION,
        "config": c.config,
        "train_config": c.train_config,
        "epoch": c.epoch,
        "val_loss": c.val_loss,
        "graphs": c.graphs,
        "history": c.history,
        "tensors": manifest,
        "payload_bytes": len(payload),
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_bytes(CHECKPOINT_MAGIC + struct.pack("<Q", len(hbytes)) + hbytes + payload)
    return p


def load_checkpoint(path) -> Checkpoint:
    blob = Path(path).read_bytes()
    head = len(CHECKPOINT_MAGIC) + 8
    if len(blob) < head or not blob.startswith(CHECKPOINT_MAGIC):
        raise IntegrityError(f"{path}: not an odformer checkpoint")
    (hlen,) = struct.unpack("<Q", blob[len(CHECKPOINT_MAGIC):head])
    if len(blob) < head + hlen:
        raise IntegrityError(f"{path}: truncated header")
    try:
        header = json.loads(blob[head:head + hlen])
    except ValueError:
        raise IntegrityError(f"{path}: corrupt header") from None
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise VersionError(f"checkpoint format version {header.get('format_version')} is not supported "
                           f"(expected {CHECKPOINT_VERSION})")
    payload = blob[head + hlen:]
    if len(payload) != header["payload_bytes"] or hashlib.sha256(payload).hexdigest() != header["payload_sha256"]:
        raise IntegrityError(f"{path}: payload truncated or corrupt")
    sections = {"params": {}, "optimizer": {}}
    for t in header["tensors"]:
        raw = payload[t["offset"]:t["offset"] + t["nbytes"]]
        sections[t["section"]][t["name"]] = np.frombuffer(raw, dtype="<f8").reshape(t["shape"]).astype(np.float64)
    return Checkpoint(
        config=header["config"],
        params=sections["params"],
        optimizer_state=sections["optimizer"],
        epoch=header["epoch"],
        val_loss=header["val_loss"],
        train_config=header["train_config"],
        graphs=header["graphs"],
        history=header["history"],
    )
