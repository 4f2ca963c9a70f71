"""CNN-LSTM MCS predictor, its CNN-only ablation, and supervised training."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .autodiff import (
    LSTM,
    AvgPool2d,
    BatchNorm2d,
    Conv2d,
    Dense,
    Flatten,
    NumericError,
    ReLU,
    concat,
    concat_backward,
    load_tensors,
    save_tensors,
    sgd_step,
    softmax_ce,
)
from .channel import ChannelFrame, ConfigError, keyed_rng
from .phy import MCS_MIN, N_CLASSES


@dataclass(frozen=True)
class CnnLstmConfig:
    dense_blocks: int = 3
    convs_per_block: int = 4
    growth_channels: int = 8
    kernel: int = 3
    pool: int = 2
    lstm_layers: int = 3
    lstm_hidden: int = 64
    fcl_sizes: tuple = (128, 64, 15)
    seq_len: int = 3
    classes: int = N_CLASSES
    n_bs: int = 32
    n_ue: int = 4
    init_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "fcl_sizes", tuple(int(v) for v in self.fcl_sizes))
        if self.dense_blocks != 3 or self.convs_per_block != 4 or self.lstm_layers != 3:
            raise ConfigError("architecture is fixed at 3 dense blocks x 4 convs and 3 LSTM layers")
        if len(self.fcl_sizes) != 3 or self.fcl_sizes[-1] != self.classes:
            raise ConfigError("fcl_sizes must list three widths ending in the class count")
        if self.classes != N_CLASSES:
            raise ConfigError(f"classes must equal the MCS table size ({N_CLASSES})")
        if self.seq_len < 1 or self.growth_channels < 1 or self.lstm_hidden < 1 or self.kernel < 1:
            raise ConfigError("seq_len, growth_channels, lstm_hidden and kernel must be positive")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 64
    learning_rate: float = 1e-3
    epochs: int = 300
    seed: int = 0
    eval_every: int = 1

    def __post_init__(self):
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 (batch norm)")
        if self.epochs < 1 or self.eval_every < 1:
            raise ConfigError("epochs and eval_every must be >= 1")
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be >= 0")


@dataclass
class Sample:
    x: np.ndarray  # (T, 2, n_bs, n_ue)
    y: int  # class index, MCS - 10
    user_id: int = 0
    scenario: str = ""


@dataclass
class SampleSet:
    """Column-oriented batch of samples."""

    x: np.ndarray  # (N, T, 2, n_bs, n_ue)
    y: np.ndarray  # (N,) class indices
    user: np.ndarray | None = None
    scenario: np.ndarray | None = None  # scenario id per sample
    frame: np.ndarray | None = None
    sinr_db: np.ndarray | None = None
    scenario_tags: tuple = ()

    def __len__(self):
        return len(self.y)

    def subset(self, idx) -> "SampleSet":
        idx = np.asarray(idx)
        if idx.size == 0:
            idx = idx.astype(np.intp)
        pick = lambda a: None if a is None else a[idx]
        return SampleSet(self.x[idx], self.y[idx], pick(self.user), pick(self.scenario), pick(self.frame),
                         pick(self.sinr_db), self.scenario_tags)

    def sample(self, i: int) -> Sample:
        tag = self.scenario_tags[self.scenario[i]] if self.scenario is not None and self.scenario_tags else ""
        return Sample(self.x[i], int(self.y[i]), 0 if self.user is None else int(self.user[i]), tag)

    @classmethod
    def from_samples(cls, samples) -> "SampleSet":
        return cls(np.stack([s.x for s in samples]), np.array([s.y for s in samples]),
                   np.array([s.user_id for s in samples]))


# ---------------------------------------------------------------------------
# Input preparation


def normalize_sample(frames, t_len: int | None = None, target_user: int = 0,
                     return_scale: bool = False):
    """Stack real/imag planes of the last ``t_len`` frames and scale to unit RMS.

    The user axis is cyclically rotated so ``target_user`` lands in column 0.
    """
    frames = list(frames)
    if t_len is not None:
        if len(frames) < t_len:
            raise ValueError(f"need {t_len} frames, got {len(frames)}")
        frames = frames[-t_len:]
    x = np.stack([np.stack([f.re, f.im]) if isinstance(f, ChannelFrame) else np.asarray(f) for f in frames])
    x = np.roll(x, -int(target_user), axis=-1)
    rms = math.sqrt(float(np.mean(x * x)))
    if not rms > 0 or not math.isfinite(rms):
        raise ValueError("cannot normalize a sample with zero or non-finite RMS")
    x = x / rms
    return (x, rms) if return_scale else x


# ---------------------------------------------------------------------------
# Network pieces


class DenseBlock:
    """Four 3x3 convs; concat skips after the 2nd and 4th; BN at the end."""

    def __init__(self, c_in: int, growth: int, kernel: int, rng, name: str):
        g = growth
        self.convs = [
            Conv2d(c_in, g, kernel, rng=rng, name=f"{name}.conv0"),
            Conv2d(g, g, kernel, rng=rng, name=f"{name}.conv1"),
            Conv2d(c_in + g, g, kernel, rng=rng, name=f"{name}.conv2"),
            Conv2d(g, g, kernel, rng=rng, name=f"{name}.conv3"),
        ]
        self.relus = [ReLU() for _ in range(4)]
        self.c_in, self.c_out = c_in, c_in + 2 * g
        self.bn = BatchNorm2d(self.c_out, name=f"{name}.bn")

    def layers(self):
        return [*self.convs, self.bn]

    def output_shape(self, shape):
        c, h, w = shape
        a = self.convs[0].output_shape(shape)
        a = self.convs[1].output_shape(a)
        if a[1:] != (h, w):
            raise ConfigError("dense block convolutions must preserve the feature-map size")
        x1 = (c + a[0], h, w)
        a = self.convs[3].output_shape(self.convs[2].output_shape(x1))
        return self.bn.output_shape((x1[0] + a[0], h, w))

    def forward(self, x0):
        a = self.relus[0].forward(self.convs[0].forward(x0))
        a = self.relus[1].forward(self.convs[1].forward(a))
        x1 = concat([x0, a])
        b = self.relus[2].forward(self.convs[2].forward(x1))
        b = self.relus[3].forward(self.convs[3].forward(b))
        x2 = concat([x1, b])
        self._sizes = (x0.shape[1], a.shape[1], x1.shape[1], b.shape[1])
        return self.bn.forward(x2)

    def backward(self, dout):
        c0, ca, c1, cb = self._sizes
        dx2 = self.bn.backward(dout)
        dx1, db = concat_backward(dx2, [c1, cb])
        db = self.convs[3].backward(self.relus[3].backward(db))
        dx1 = dx1 + self.convs[2].backward(self.relus[2].backward(db))
        dx0, da = concat_backward(dx1, [c0, ca])
        da = self.convs[1].backward(self.relus[1].backward(da))
        return dx0 + self.convs[0].backward(self.relus[0].backward(da))


class CnnTrunk:
    """Dense blocks interleaved with adaptive average pools, then flatten."""

    def __init__(self, cfg: CnnLstmConfig, rng, name: str = "trunk"):
        self.blocks, self.pools = [], []
        c = 2
        for b in range(cfg.dense_blocks):
            blk = DenseBlock(c, cfg.growth_channels, cfg.kernel, rng, f"{name}.block{b}")
            self.blocks.append(blk)
            c = blk.c_out
            if b < cfg.dense_blocks - 1:
                self.pools.append(AvgPool2d(cfg.pool))
        self.flatten = Flatten()
        self.out_shape = self.output_shape((2, cfg.n_bs, cfg.n_ue))
        self.n_features = self.out_shape[0]

    def layers(self):
        return [l for blk in self.blocks for l in blk.layers()]

    def output_shape(self, shape):
        for b, blk in enumerate(self.blocks):
            shape = blk.output_shape(shape)
            if b < len(self.pools):
                shape = self.pools[b].output_shape(shape)
        return self.flatten.output_shape(shape)

    def forward(self, x):
        for b, blk in enumerate(self.blocks):
            x = blk.forward(x)
            if b < len(self.pools):
                x = self.pools[b].forward(x)
        return self.flatten.forward(x)

    def backward(self, dout):
        d = self.flatten.backward(dout)
        for b in reversed(range(len(self.blocks))):
            if b < len(self.pools):
                d = self.pools[b].backward(d)
            d = self.blocks[b].backward(d)
        return d


class Head:
    """Three fully connected layers: relu, relu, linear."""

    def __init__(self, n_in: int, sizes, rng, name: str = "fcl"):
        self.dense, self.relus = [], []
        for k, width in enumerate(sizes):
            self.dense.append(Dense(n_in, width, rng=rng, name=f"{name}{k}"))
            n_in = width
        self.relus = [ReLU() for _ in sizes[:-1]]

    def forward(self, x):
        for k, d in enumerate(self.dense):
            x = d.forward(x)
            if k < len(self.relus):
                x = self.relus[k].forward(x)
        return x

    def backward(self, dout):
        for k in reversed(range(len(self.dense))):
            if k < len(self.relus):
                dout = self.relus[k].backward(dout)
            dout = self.dense[k].backward(dout)
        return dout


class PolicyModel:
    """Shared plumbing: parameters, buffers, train/eval mode, checkpoints."""

    kind = "base"

    def layers(self):
        raise NotImplementedError

    def params(self):
        return [p for layer in self.layers() for p in layer.params()]

    def buffers(self):
        out = {}
        for layer in self.layers():
            out.update(layer.buffers())
        return out

    def activation_pattern(self) -> bytes:
        """Packed ReLU masks of the last forward pass."""
        masks = [r._mask for r in self._relus() if hasattr(r, "_mask")]
        return b"".join(np.packbits(m).tobytes() for m in masks)

    def _relus(self):
        return []

    @property
    def n_params(self) -> int:
        return int(sum(p.value.size for p in self.params()))

    def train(self, mode: bool = True):
        for layer in self.layers():
            layer.training = mode
        return self

    def eval(self):
        return self.train(False)

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {p.name: p.value for p in self.params()}
        state.update(self.buffers())
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = {p.name: p for p in self.params()}
        bufs = self.buffers()
        missing = (set(own) | set(bufs)) - set(state)
        if missing:
            raise ConfigError(f"checkpoint lacks tensors: {sorted(missing)[:5]}")
        for name, p in own.items():
            if state[name].shape != p.value.shape:
                raise ConfigError(f"shape mismatch for {name}: {state[name].shape} vs {p.value.shape}")
            p.value[...] = state[name]
        for name, b in bufs.items():
            b[...] = state[name]

    def descriptor(self) -> dict:
        return {
            "kind": self.kind,
            "config": _cfg_dict(self.cfg),
            "n_params": self.n_params,
            "layers": [l.spec().as_dict() for l in self.layers()],
        }

    def save(self, path) -> None:
        save_tensors(path, self.state_dict())
        with open(f"{path}.arch.json", "w") as fh:
            json.dump(self.descriptor(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    def logits(self, x: np.ndarray, batch: int = 256) -> np.ndarray:
        """Inference-mode logits for a batch of samples."""
        was_training = self.layers()[0].training
        self.eval()
        out = np.concatenate([self.forward(x[i : i + batch]) for i in range(0, len(x), batch)])
        self.train(was_training)
        return out


def _cfg_dict(cfg) -> dict:
    d = asdict(cfg)
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


class CnnLstm(PolicyModel):
    kind = "cnn_lstm"

    def __init__(self, cfg: CnnLstmConfig):
        self.cfg = cfg
        rng = keyed_rng(cfg.init_seed, 1)
        self.trunk = CnnTrunk(cfg, rng)
        self.lstm = LSTM(self.trunk.n_features, cfg.lstm_hidden, cfg.lstm_layers, rng=rng)
        self.head = Head(cfg.lstm_hidden, cfg.fcl_sizes, rng)

    def layers(self):
        return [*self.trunk.layers(), self.lstm, *self.head.dense]

    def _relus(self):
        return [r for blk in self.trunk.blocks for r in blk.relus] + self.head.relus

    def forward(self, x):
        n, t = x.shape[:2]
        feats = self.trunk.forward(x.reshape(n * t, *x.shape[2:]))
        h = self.lstm.forward(feats.reshape(n, t, -1))
        self._shape = x.shape
        return self.head.forward(h)

    def backward(self, dlogits):
        n, t = self._shape[:2]
        dh = self.head.backward(dlogits)
        dfeat = self.lstm.backward(dh)
        return self.trunk.backward(dfeat.reshape(n * t, -1)).reshape(self._shape)


class CnnOnly(PolicyModel):
    """Same trunk and head widths; the LSTM is removed and only the last frame is used."""

    kind = "cnn_only"

    def __init__(self, cfg: CnnLstmConfig):
        self.cfg = cfg
        rng = keyed_rng(cfg.init_seed, 1)
        self.trunk = CnnTrunk(cfg, rng)
        self.head = Head(self.trunk.n_features, cfg.fcl_sizes, rng)

    def layers(self):
        return [*self.trunk.layers(), *self.head.dense]

    def _relus(self):
        return [r for blk in self.trunk.blocks for r in blk.relus] + self.head.relus

    def forward(self, x):
        if x.ndim == 5:
            self._shape = x.shape
            x = x[:, -1]
        else:
            self._shape = None
        return self.head.forward(self.trunk.forward(x))

    def backward(self, dlogits):
        d = self.trunk.backward(self.head.backward(dlogits))
        if self._shape is None:
            return d
        dx = np.zeros(self._shape)
        dx[:, -1] = d
        return dx


def build_cnn_lstm(cfg: CnnLstmConfig | None = None) -> CnnLstm:
    return CnnLstm(cfg or CnnLstmConfig())


def build_cnn_only(cfg: CnnLstmConfig | None = None) -> CnnOnly:
    return CnnOnly(cfg or CnnLstmConfig())


def build_model(kind: str, cfg: CnnLstmConfig) -> PolicyModel:
    if kind == "cnn_lstm":
        return build_cnn_lstm(cfg)
    if kind == "cnn_only":
        return build_cnn_only(cfg)
    raise ConfigError(f"unknown supervised model {kind!r}")


def load_model(path) -> PolicyModel:
    with open(f"{path}.arch.json") as fh:
        desc = json.load(fh)
    cfg = CnnLstmConfig(**desc["config"])
    model = build_model(desc["kind"], cfg)
    model.load_state_dict(load_tensors(path))
    return model


# ---------------------------------------------------------------------------
# Training and evaluation


@dataclass
class TrainReport:
    loss: list = field(default_factory=list)
    train_acc: list = field(default_factory=list)
    test_acc: list = field(default_factory=list)
    checkpoint: str = ""

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "loss", "train_acc", "test_acc"])
            for e, row in enumerate(zip(self.loss, self.train_acc, self.test_acc), start=1):
                w.writerow([e, *(repr(float(v)) for v in row)])

    @classmethod
    def from_csv(cls, path) -> "TrainReport":
        rep = cls()
        with open(path) as fh:
            for row in csv.DictReader(fh):
                rep.loss.append(float(row["loss"]))
                rep.train_acc.append(float(row["train_acc"]))
                rep.test_acc.append(float(row["test_acc"]))
        return rep


def predict_logits(logits: np.ndarray) -> np.ndarray:
    """MCS index from logits; ties resolve to the lower (safer) index."""
    return np.argmax(np.atleast_2d(logits), axis=1) + MCS_MIN


def predict(model: PolicyModel, sample) -> int:
    x = sample.x if isinstance(sample, Sample) else np.asarray(sample)
    return int(predict_logits(model.logits(x[None]))[0])


def predict_batch(model: PolicyModel, x: np.ndarray) -> np.ndarray:
    return predict_logits(model.logits(x))


def accuracy(model, dataset: SampleSet) -> float:
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    pred = model(dataset) if callable(model) and not isinstance(model, PolicyModel) else predict_batch(model, dataset.x)
    return float(np.mean(np.asarray(pred) == dataset.y + MCS_MIN))


def train_supervised(model: PolicyModel, train: SampleSet, test: SampleSet | None, tc: TrainConfig,
                     log=None) -> TrainReport:
    """Mini-batch SGD on softmax cross-entropy.

    Batches come from a per-epoch keyed permutation; a trailing batch of a
    single sample is dropped (batch norm needs two).
    """
    if len(train) == 0 or (test is not None and len(test) == 0):
        raise ConfigError("train and test splits must be nonempty")
    report = TrainReport()
    params = model.params()
    for p in params:
        p.zero_grad()
    n = len(train)
    last_test = float("nan")
    for epoch in range(tc.epochs):
        model.train()
        order = keyed_rng(tc.seed, 7, epoch).permutation(n)
        tot_loss, correct, seen = 0.0, 0, 0
        for start in range(0, n, tc.batch_size):
            idx = np.sort(order[start : start + tc.batch_size])
            if len(idx) < 2:
                continue
            xb = train.x[idx].astype(np.float64)
            logits = model.forward(xb)
            loss, dlogits = softmax_ce(logits, train.y[idx])
            if not math.isfinite(loss):
                raise NumericError(f"non-finite loss at epoch {epoch + 1}")
            model.backward(dlogits)
            sgd_step(params, tc.learning_rate)
            tot_loss += loss * len(idx)
            correct += int(np.sum(np.argmax(logits, axis=1) == train.y[idx]))
            seen += len(idx)
        report.loss.append(tot_loss / seen)
        report.train_acc.append(correct / seen)
        if test is not None and ((epoch + 1) % tc.eval_every == 0 or epoch + 1 == tc.epochs):
            last_test = accuracy(model, test)
        report.test_acc.append(last_test if test is not None else float("nan"))
        if log:
            log(f"epoch {epoch + 1}/{tc.epochs} loss={report.loss[-1]:.4f} "
                f"train_acc={report.train_acc[-1]:.4f} test_acc={report.test_acc[-1]:.4f}")
    model.eval()
    return report
