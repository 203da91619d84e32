"""Word encoders (char CNN / char BiLSTM), multi-head classifier, training.

Both encoders map an encoded character sequence to a fixed-size word
representation; one softmax head per feature class sits on top.  Training
minimizes the summed per-class cross entropy with Adam and early stopping
on validation mean accuracy.  Inference runs in plain numpy; the autodiff
tape is only built during training.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import AdamState, Rng, Tensor, adam_step, backward
from .corpus import (
    BOW_ID, EOW_ID, PAD_ID, UNK_ID, CharVocab, FeatureSchema, WordSample,
    dedupe, encode_word,
)

__all__ = [
    "ModelError",
    "ModelFormatError",
    "TrainingDiverged",
    "CnnConfig",
    "LstmConfig",
    "TrainConfig",
    "Dataset",
    "TaggerModel",
    "cnn_forward",
    "bilstm_forward",
    "classify",
    "joint_loss",
    "train",
    "evaluate_accuracy",
    "majority_vote_labels",
    "save_model",
    "load_model",
]

GATES = ("i", "f", "g", "o")  # input, forget, candidate, output


class ModelError(ValueError):
    pass


class ModelFormatError(ModelError):
    """Model file magic/version/checksum problem."""


class TrainingDiverged(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# Configs
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CnnConfig:
    """Filter bank configuration; defaults give the 525-filter encoder."""

    embed_dim: int = 50
    widths: tuple[int, ...] = (1, 2, 3, 4, 5, 6)
    counts: tuple[int, ...] = (25, 50, 75, 100, 125, 150)

    def __post_init__(self):
        if len(self.widths) != len(self.counts):
            raise ModelError("widths and counts must align")

    @property
    def d2(self) -> int:
        return sum(self.counts)

    @property
    def min_len(self) -> int:
        return max(self.widths)

    def to_dict(self) -> dict:
        return {"arch": "cnn", "embed_dim": self.embed_dim,
                "widths": list(self.widths), "counts": list(self.counts)}


@dataclass(frozen=True)
class LstmConfig:
    embed_dim: int = 50
    hidden: int = 100

    @property
    def d2(self) -> int:
        return 2 * self.hidden

    @property
    def min_len(self) -> int:
        return 0

    def to_dict(self) -> dict:
        return {"arch": "bilstm", "embed_dim": self.embed_dim,
                "hidden": self.hidden}


def config_from_dict(d: dict):
    if d["arch"] == "cnn":
        return CnnConfig(embed_dim=d["embed_dim"], widths=tuple(d["widths"]),
                         counts=tuple(d["counts"]))
    if d["arch"] == "bilstm":
        return LstmConfig(embed_dim=d["embed_dim"], hidden=d["hidden"])
    raise ModelFormatError(f"unknown architecture {d['arch']!r}")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 20
    max_epochs: int = 50
    patience: int = 5
    seed: int = 1
    unk_substitution_prob: float = 0.1

    def __post_init__(self):
        if self.batch_size < 1 or self.max_epochs < 1 or self.patience < 1:
            raise ModelError("batch_size, max_epochs and patience must be positive")
        if self.lr < 0:
            raise ModelError("lr must be >= 0")


@dataclass
class Dataset:
    """Deduplicated splits plus the vocabulary built from the training words."""

    schema: FeatureSchema
    vocab: CharVocab
    train: list[WordSample]
    valid: list[WordSample]
    test: list[WordSample] = field(default_factory=list)

    @classmethod
    def build(cls, schema: FeatureSchema, train: list[WordSample],
              valid: list[WordSample],
              test: list[WordSample] | None = None) -> "Dataset":
        train_u, _, _ = dedupe(train)
        valid_u, _, _ = dedupe(valid)
        test_u = dedupe(test)[0] if test else []
        return cls(schema=schema, vocab=CharVocab.build(train_u),
                   train=train_u, valid=valid_u, test=test_u)


def majority_vote_labels(samples: list[WordSample],
                         schema: FeatureSchema) -> dict[str, str]:
    """Most frequent training label per class (ties: schema label order)."""
    out = {}
    for name, labels in schema.classes:
        counts = {lab: 0 for lab in labels}
        for s in samples:
            counts[s.features[name]] += 1
        out[name] = max(labels, key=lambda lab: counts[lab])
    return out


# ---------------------------------------------------------------------------
# Model container
# ---------------------------------------------------------------------------

@dataclass
class TaggerModel:
    """Trained weights, vocabulary, schema and majority baseline."""

    arch: str  # "cnn" | "bilstm"
    config: CnnConfig | LstmConfig
    schema: FeatureSchema
    vocab: CharVocab
    params: dict[str, np.ndarray]
    majority: dict[str, str]

    @property
    def d2(self) -> int:
        return self.config.d2

    @property
    def min_len(self) -> int:
        return self.config.min_len

    def encode(self, surface: str) -> list[int]:
        return encode_word(surface, self.vocab, min_len=self.min_len)

    def representation(self, ids: list[int]) -> np.ndarray:
        if self.arch == "cnn":
            return cnn_forward(self, ids).rep
        return bilstm_forward(self, ids).rep

    def predict(self, surface: str) -> dict[str, str]:
        probs = classify(self, self.representation(self.encode(surface)))
        return {name: self.schema.labels(name)[int(np.argmax(p))]
                for name, p in probs.items()}

    def head(self, class_name: str) -> tuple[np.ndarray, np.ndarray]:
        return (self.params[f"head:{class_name}:w"],
                self.params[f"head:{class_name}:b"])


def init_params(arch: str, config, schema: FeatureSchema, vocab_size: int,
                rng: Rng) -> dict[str, np.ndarray]:
    """Orthogonal weight matrices, uniform [-0.01, 0.01) embeddings, zero biases."""
    params: dict[str, np.ndarray] = {
        "embedding": ad.uniform_init((vocab_size, config.embed_dim),
                                     -0.01, 0.01, rng.split("embedding")),
    }
    if arch == "cnn":
        for n, count in zip(config.widths, config.counts):
            params[f"conv{n}:w"] = ad.orthogonal_init(
                n * config.embed_dim, count, rng.split(f"conv{n}"))
            params[f"conv{n}:b"] = np.zeros(count)
    elif arch == "bilstm":
        d1, h = config.embed_dim, config.hidden
        for direction in ("fw", "bw"):
            params[f"{direction}:wx"] = np.hstack([
                ad.orthogonal_init(d1, h, rng.split(f"{direction}:wx:{g}"))
                for g in GATES])
            params[f"{direction}:wh"] = np.hstack([
                ad.orthogonal_init(h, h, rng.split(f"{direction}:wh:{g}"))
                for g in GATES])
            params[f"{direction}:b"] = np.zeros(4 * h)
    else:
        raise ModelError(f"unknown architecture {arch!r}")
    for name in schema.class_names:
        n_labels = len(schema.labels(name))
        params[f"head:{name}:w"] = ad.orthogonal_init(
            config.d2, n_labels, rng.split(f"head:{name}"))
        params[f"head:{name}:b"] = np.zeros(n_labels)
    return params


# ---------------------------------------------------------------------------
# Forward passes (numpy inference)
# ---------------------------------------------------------------------------

@dataclass
class CnnForward:
    rep: np.ndarray          # (d2,) pooled features
    argmax: np.ndarray       # (d2,) winning window start per filter
    embedded: np.ndarray     # (T, d1)
    preact: list[np.ndarray]  # per width: (T - n + 1, count) pre-ReLU


def _window_index(T: int, n: int) -> np.ndarray:
    return np.arange(T - n + 1)[:, None] + np.arange(n)[None, :]


def cnn_forward(model: TaggerModel, ids: list[int]) -> CnnForward:
    """Per filter: convolution, ReLU, max over time (first argmax on ties)."""
    cfg = model.config
    T = len(ids)
    if T < cfg.min_len:
        raise ModelError(f"sequence of length {T} shorter than widest filter "
                         f"{cfg.min_len}")
    X = model.params["embedding"][np.asarray(ids, dtype=np.intp)]
    reps, arg, preact = [], [], []
    for n in cfg.widths:
        wmat = model.params[f"conv{n}:w"]
        b = model.params[f"conv{n}:b"]
        windows = X[_window_index(T, n)].reshape(T - n + 1, n * cfg.embed_dim)
        z = windows @ wmat + b
        c = np.maximum(z, 0.0)
        reps.append(c.max(axis=0))
        arg.append(c.argmax(axis=0))
        preact.append(z)
    return CnnForward(rep=np.concatenate(reps), argmax=np.concatenate(arg),
                      embedded=X, preact=preact)


@dataclass
class LstmForward:
    rep: np.ndarray  # (2H,) = concat(final forward h, final backward h)
    h_fw: np.ndarray  # (T, H) forward hidden states
    h_bw: np.ndarray  # (T, H) backward states, index t = input position t
    embedded: np.ndarray


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-x))


def _lstm_direction(X: np.ndarray, wx: np.ndarray, wh: np.ndarray,
                    b: np.ndarray, reverse: bool) -> np.ndarray:
    T = X.shape[0]
    H = wh.shape[0]
    h = np.zeros(H)
    c = np.zeros(H)
    states = np.zeros((T, H))
    order = range(T - 1, -1, -1) if reverse else range(T)
    for t in order:
        z = X[t] @ wx + h @ wh + b
        i = _sigmoid(z[0:H])
        f = _sigmoid(z[H:2 * H])
        g = np.tanh(z[2 * H:3 * H])
        o = _sigmoid(z[3 * H:4 * H])
        c = f * c + i * g
        h = o * np.tanh(c)
        states[t] = h
    return states


def bilstm_forward(model: TaggerModel, ids: list[int]) -> LstmForward:
    """Run both directions and concatenate the final hidden states."""
    X = model.params["embedding"][np.asarray(ids, dtype=np.intp)]
    h_fw = _lstm_direction(X, model.params["fw:wx"], model.params["fw:wh"],
                           model.params["fw:b"], reverse=False)
    h_bw = _lstm_direction(X, model.params["bw:wx"], model.params["bw:wh"],
                           model.params["bw:b"], reverse=True)
    return LstmForward(rep=np.concatenate([h_fw[-1], h_bw[0]]),
                       h_fw=h_fw, h_bw=h_bw, embedded=X)


def classify(model: TaggerModel, rep: np.ndarray) -> dict[str, np.ndarray]:
    """Stable softmax distribution per feature-class head."""
    if rep.shape != (model.d2,):
        raise ModelError(f"representation shape {rep.shape} != ({model.d2},)")
    out = {}
    for name in model.schema.class_names:
        w, b = model.head(name)
        logits = rep @ w + b
        logits = logits - logits.max()
        e = np.exp(logits)
        out[name] = e / e.sum()
    return out


def joint_loss(logits: dict[str, np.ndarray],
               gold: dict[str, int]) -> float:
    """Sum over heads of -log p(gold), computed with log-sum-exp."""
    total = 0.0
    for name, z in logits.items():
        m = z.max()
        total += m + np.log(np.exp(z - m).sum()) - z[gold[name]]
    return float(total)


# ---------------------------------------------------------------------------
# Training graphs
# ---------------------------------------------------------------------------

def _cnn_word_loss(params: dict[str, Tensor], cfg: CnnConfig, ids: list[int],
                   gold: dict[str, int], schema: FeatureSchema) -> Tensor:
    T = len(ids)
    ids_arr = np.asarray(ids, dtype=np.intp)
    pooled = []
    for n in cfg.widths:
        win = ids_arr[_window_index(T, n)].reshape(-1)
        rows = ad.take_rows(params["embedding"], win)
        windows = ad.reshape(rows, (T - n + 1, n * cfg.embed_dim))
        z = ad.add(ad.matmul(windows, params[f"conv{n}:w"]), params[f"conv{n}:b"])
        pooled.append(ad.max_over_time(ad.relu(z)))
    rep = ad.concat(pooled)
    return _heads_loss(params, rep, gold, schema)


def _lstm_word_loss(params: dict[str, Tensor], cfg: LstmConfig, ids: list[int],
                    gold: dict[str, int], schema: FeatureSchema) -> Tensor:
    ids_arr = np.asarray(ids, dtype=np.intp)
    X = ad.take_rows(params["embedding"], ids_arr)
    H = cfg.hidden
    finals = []
    for direction, reverse in (("fw", False), ("bw", True)):
        wx = params[f"{direction}:wx"]
        wh = params[f"{direction}:wh"]
        b = params[f"{direction}:b"]
        T = len(ids)
        h = None
        c = None
        order = range(T - 1, -1, -1) if reverse else range(T)
        for t in order:
            x_t = ad.take_rows(X, np.asarray([t], dtype=np.intp))
            z = ad.add(ad.matmul(x_t, wx), b)
            if h is not None:
                z = ad.add(z, ad.matmul(h, wh))
            i = ad.sigmoid(ad.slice_cols(z, 0, H))
            f = ad.sigmoid(ad.slice_cols(z, H, 2 * H))
            g = ad.tanh(ad.slice_cols(z, 2 * H, 3 * H))
            o = ad.sigmoid(ad.slice_cols(z, 3 * H, 4 * H))
            c = ad.mul(i, g) if c is None else ad.add(ad.mul(f, c), ad.mul(i, g))
            h = ad.mul(o, ad.tanh(c))
        finals.append(ad.reshape(h, (H,)))
    rep = ad.concat(finals)
    return _heads_loss(params, rep, gold, schema)


def _heads_loss(params: dict[str, Tensor], rep: Tensor,
                gold: dict[str, int], schema: FeatureSchema) -> Tensor:
    rep2 = ad.reshape(rep, (1, rep.data.shape[0]))
    losses = []
    for name in schema.class_names:
        z = ad.add(ad.matmul(rep2, params[f"head:{name}:w"]),
                   params[f"head:{name}:b"])
        logits = ad.reshape(z, (z.data.shape[1],))
        losses.append(ad.softmax_cross_entropy(logits, gold[name]))
    return ad.add_n(losses)


def word_loss(params: dict[str, Tensor], arch: str, config, ids: list[int],
              gold: dict[str, int], schema: FeatureSchema) -> Tensor:
    if arch == "cnn":
        return _cnn_word_loss(params, config, ids, gold, schema)
    return _lstm_word_loss(params, config, ids, gold, schema)


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    valid_accuracy: float


def _gold_indices(sample: WordSample, schema: FeatureSchema) -> dict[str, int]:
    return {name: schema.label_index(name, sample.features[name])
            for name in schema.class_names}


def _mean_valid_accuracy(model: TaggerModel, encoded, golds) -> float:
    n_classes = len(model.schema.class_names)
    correct = {name: 0 for name in model.schema.class_names}
    for ids, gold in zip(encoded, golds):
        rep = model.representation(ids)
        for name in model.schema.class_names:
            w, b = model.head(name)
            if int(np.argmax(rep @ w + b)) == gold[name]:
                correct[name] += 1
    n = max(len(encoded), 1)
    return sum(correct.values()) / (n * n_classes)


def train(arch: str, dataset: Dataset, config: TrainConfig,
          model_config=None) -> tuple[TaggerModel, list[EpochRecord]]:
    """Adam minibatch training with early stopping on validation accuracy.

    Returns the weights of the best validation epoch plus the per-epoch
    history.  Deterministic given (arch, dataset, config).
    """
    if arch not in ("cnn", "bilstm"):
        raise ModelError(f"unknown architecture {arch!r}")
    if model_config is None:
        model_config = CnnConfig() if arch == "cnn" else LstmConfig()
    rng = Rng(config.seed)
    params_np = init_params(arch, model_config, dataset.schema,
                            dataset.vocab.size, rng.split("init"))
    params = {k: Tensor(v, requires_grad=True) for k, v in params_np.items()}
    adam = AdamState.for_params(params)
    shuffle_rng = rng.split("shuffle")
    unk_rng = rng.split("unk")

    model = TaggerModel(arch=arch, config=model_config, schema=dataset.schema,
                        vocab=dataset.vocab,
                        params={k: t.data for k, t in params.items()},
                        majority=majority_vote_labels(dataset.train,
                                                      dataset.schema))

    min_len = model_config.min_len
    enc_train = [encode_word(s.surface, dataset.vocab, min_len)
                 for s in dataset.train]
    gold_train = [_gold_indices(s, dataset.schema) for s in dataset.train]
    singleton_pos = [
        [i for i, ch in enumerate(s.surface, start=1)
         if dataset.vocab.is_singleton(ch)]
        for s in dataset.train]
    enc_valid = [encode_word(s.surface, dataset.vocab, min_len)
                 for s in dataset.valid]
    gold_valid = [_gold_indices(s, dataset.schema) for s in dataset.valid]

    history: list[EpochRecord] = []
    best_acc = -1.0
    best_params: dict[str, np.ndarray] | None = None
    patience_left = config.patience
    indices = list(range(len(enc_train)))
    p_unk = config.unk_substitution_prob

    for epoch in range(1, config.max_epochs + 1):
        shuffle_rng.shuffle(indices)
        epoch_loss = 0.0
        for start in range(0, len(indices), config.batch_size):
            batch = indices[start:start + config.batch_size]
            try:
                losses = []
                for idx in batch:
                    ids = enc_train[idx]
                    if p_unk > 0.0 and singleton_pos[idx]:
                        ids = list(ids)
                        for pos in singleton_pos[idx]:
                            if unk_rng.random() < p_unk:
                                ids[pos] = UNK_ID
                    losses.append(word_loss(params, arch, model_config, ids,
                                            gold_train[idx], dataset.schema))
                loss = ad.scale(ad.add_n(losses), 1.0 / len(batch))
                grads = backward(loss, params)
                adam_step(params, grads, adam, lr=config.lr)
            except ad.NonFiniteError as exc:
                raise TrainingDiverged(
                    f"non-finite value at epoch {epoch}: {exc}") from exc
            epoch_loss += float(loss.data) * len(batch)
        epoch_loss /= max(len(indices), 1)
        val_acc = _mean_valid_accuracy(model, enc_valid, gold_valid)
        history.append(EpochRecord(epoch, epoch_loss, val_acc))
        if val_acc >= best_acc:
            # Ties keep the later (more converged) weights but still count
            # against patience so plateaus terminate.
            best_params = {k: t.data.copy() for k, t in params.items()}
        if val_acc > best_acc:
            best_acc = val_acc
            patience_left = config.patience
        else:
            patience_left -= 1
            if patience_left == 0:
                break

    if best_params is not None:
        model.params = best_params
    return model, history


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

@dataclass
class AccuracyReport:
    per_class: dict[str, float]
    average: float
    majority_per_class: dict[str, float]
    majority_average: float
    n_words: int

    def to_dict(self) -> dict:
        return {"per_class": self.per_class, "average": self.average,
                "majority_per_class": self.majority_per_class,
                "majority_average": self.majority_average,
                "n_words": self.n_words}


def evaluate_accuracy(model: TaggerModel,
                      samples: list[WordSample]) -> AccuracyReport:
    """Per-class and average argmax accuracy plus the majority-vote baseline."""
    names = model.schema.class_names
    correct = {name: 0 for name in names}
    baseline = {name: 0 for name in names}
    for s in samples:
        for name in names:
            if s.features.get(name) is None:
                raise ModelError(f"sample {s.surface!r} lacks class {name}")
        pred = model.predict(s.surface)
        for name in names:
            if pred[name] == s.features[name]:
                correct[name] += 1
            if model.majority[name] == s.features[name]:
                baseline[name] += 1
    n = max(len(samples), 1)
    per_class = {name: correct[name] / n for name in names}
    maj = {name: baseline[name] / n for name in names}
    return AccuracyReport(
        per_class=per_class,
        average=sum(per_class.values()) / len(names),
        majority_per_class=maj,
        majority_average=sum(maj.values()) / len(names),
        n_words=len(samples))


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

FORMAT_MAGIC = b"CHCD"
FORMAT_VERSION = 1


def save_model(model: TaggerModel, path) -> None:
    """Versioned binary container: header JSON, named f64 tensors, checksum."""
    header = {
        "arch": model.arch,
        "config": model.config.to_dict(),
        "schema": model.schema.to_dict(),
        "vocab": model.vocab.to_dict(),
        "majority": dict(sorted(model.majority.items())),
        "d2": model.d2,
    }
    blob = bytearray()
    blob += FORMAT_MAGIC
    blob += struct.pack("<I", FORMAT_VERSION)
    header_bytes = json.dumps(header, sort_keys=True,
                              separators=(",", ":")).encode("utf-8")
    blob += struct.pack("<Q", len(header_bytes))
    blob += header_bytes
    names = sorted(model.params)
    blob += struct.pack("<I", len(names))
    for name in names:
        arr = np.ascontiguousarray(model.params[name], dtype="<f8")
        name_b = name.encode("utf-8")
        blob += struct.pack("<H", len(name_b))
        blob += name_b
        blob += struct.pack("<B", arr.ndim)
        for dim in arr.shape:
            blob += struct.pack("<Q", dim)
        blob += arr.tobytes()
    blob += hashlib.sha256(bytes(blob)).digest()
    with open(path, "wb") as fh:
        fh.write(bytes(blob))


def load_model(path) -> TaggerModel:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 40 or blob[:4] != FORMAT_MAGIC:
        raise ModelFormatError(
            f"not a model file (magic {blob[:4]!r}, expected {FORMAT_MAGIC!r})")
    body, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise ModelFormatError("model file checksum mismatch")
    off = 4
    (version,) = struct.unpack_from("<I", body, off)
    off += 4
    if version != FORMAT_VERSION:
        raise ModelFormatError(
            f"unsupported model format version {version} (supported: {FORMAT_VERSION})")
    (header_len,) = struct.unpack_from("<Q", body, off)
    off += 8
    header = json.loads(body[off:off + header_len].decode("utf-8"))
    off += header_len
    (n_tensors,) = struct.unpack_from("<I", body, off)
    off += 4
    params: dict[str, np.ndarray] = {}
    for _ in range(n_tensors):
        (name_len,) = struct.unpack_from("<H", body, off)
        off += 2
        name = body[off:off + name_len].decode("utf-8")
        off += name_len
        (ndim,) = struct.unpack_from("<B", body, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}Q", body, off)
        off += 8 * ndim
        size = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(body, dtype="<f8", count=size, offset=off)
        off += 8 * size
        params[name] = arr.reshape(shape).astype(np.float64)
    return TaggerModel(
        arch=header["arch"],
        config=config_from_dict(header["config"]),
        schema=FeatureSchema.from_dict(header["schema"]),
        vocab=CharVocab.from_dict(header["vocab"]),
        params=params,
        majority=header["majority"])
