"""Pilot-jamming detection and twin-side model redeployment.

Base-station side: a lightweight softmax classifier over per-subcarrier
log-powers flags which pilot (if any) is being jammed; a short debounce
avoids redeploy thrash on single noisy frames. Twin side: a model factory
synthesizes labelled spectrum frames, trains a fresh classifier for the
relocated pilots, and ships it back over the link as a versioned binary
artifact with a trailing checksum.

Synthetic frame model: a per-subcarrier power template (noise floor on the
guard bands, data power elsewhere, extra power on pilots) perturbed
log-normally, with additive jammer power on the attacked pilot.
"""

from __future__ import annotations

import json
import logging
import struct
import threading
import time
import zlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator

import numpy as np

from .link import (
    TOPIC_DT_MODEL_ARTIFACT,
    TOPIC_DT_MODEL_REQUEST,
    LinkEndpoint,
)
from .mqtt.errors import ChecksumError

log = logging.getLogger(__name__)

# power template (linear units) and perturbation
NOISE_POWER = 1.0
DATA_POWER = 4.0
PILOT_POWER = 6.0
JAMMER_POWER = 10.0
LOG_NOISE_SIGMA = 0.1

DEFAULT_N_TRAIN = 5000
DEFAULT_N_TEST = 1000
DEFAULT_LEARNING_RATE = 0.01
DEFAULT_ITERATIONS = 300
DEFAULT_DEBOUNCE = 3

# (n_subcarriers, n_pilots) per named channel scenario
SCENARIOS = {
    "10 MHz": (64, 4),
    "20 MHz": (128, 4),
    "40 MHz": (128, 6),
}

TIMING_CSV_SCHEMA = ["channel_size", "data_transfer_s", "data_collection_s",
                     "data_processing_s", "model_creation_s",
                     "total_deployment_s"]
ACCURACY_CSV_SCHEMA = ["channel_size", "pilot_amount", "train_accuracy",
                       "test_accuracy"]

MODEL_MAGIC = b"TWNM"
MODEL_VERSION = 1


class ModelFormatError(ValueError):
    """Artifact blob violates the versioned binary layout."""


class BadMagicError(ModelFormatError):
    pass


class UnknownVersionError(ModelFormatError):
    pass


class TrainingDivergedError(RuntimeError):
    def __init__(self, iteration: int):
        super().__init__(f"training loss became non-finite at iteration {iteration}")
        self.iteration = iteration


@dataclass(frozen=True)
class PilotConfig:
    n_subcarriers: int
    pilot_indices: tuple[int, ...]
    label: str

    def __post_init__(self) -> None:
        indices = self.pilot_indices
        if list(indices) != sorted(set(indices)):
            raise ValueError("pilot indices must be distinct and sorted")
        if indices and (indices[0] < 0 or indices[-1] >= self.n_subcarriers):
            raise ValueError("pilot index out of subcarrier range")

    @property
    def n_pilots(self) -> int:
        return len(self.pilot_indices)

    @classmethod
    def for_scenario(cls, label: str, seed: int = 0) -> "PilotConfig":
        n_subcarriers, n_pilots = SCENARIOS[label]
        rng = np.random.default_rng(seed)
        lo, hi = data_band(n_subcarriers)
        indices = np.sort(rng.choice(np.arange(lo, hi), size=n_pilots,
                                     replace=False))
        return cls(n_subcarriers, tuple(int(i) for i in indices), label)


@dataclass(frozen=True)
class SpectrumFrame:
    powers: np.ndarray  # per-subcarrier linear power, length n_subcarriers
    jam_class: int  # 0 = clean, p = pilot p jammed (1-based)


def data_band(n_subcarriers: int) -> tuple[int, int]:
    """Half-open index range of data-bearing subcarriers (guards excluded)."""
    guard = n_subcarriers // 8
    return guard, n_subcarriers - guard


def base_template(config: PilotConfig) -> np.ndarray:
    powers = np.full(config.n_subcarriers, NOISE_POWER)
    lo, hi = data_band(config.n_subcarriers)
    powers[lo:hi] = DATA_POWER
    powers[list(config.pilot_indices)] = PILOT_POWER
    return powers


def generate_frame(config: PilotConfig, jam_class: int,
                   rng: np.random.Generator,
                   noise_sigma: float = LOG_NOISE_SIGMA) -> SpectrumFrame:
    """One synthetic frame; jam_class p > 0 adds jammer power on pilot p."""
    if not 0 <= jam_class <= config.n_pilots:
        raise ValueError(f"jam_class out of range: {jam_class}")
    powers = base_template(config).copy()
    if jam_class > 0:
        powers[config.pilot_indices[jam_class - 1]] += JAMMER_POWER
    perturbation = np.exp(rng.normal(0.0, noise_sigma, config.n_subcarriers))
    return SpectrumFrame(powers * perturbation, jam_class)


@dataclass(frozen=True)
class NormStats:
    mean: np.ndarray
    std: np.ndarray


def features(powers: np.ndarray, stats: NormStats) -> np.ndarray:
    """Z-scored log-powers."""
    return (np.log(powers) - stats.mean) / stats.std


def _balanced_labels(n: int, n_classes: int, rng: np.random.Generator) -> np.ndarray:
    labels = np.arange(n) % n_classes
    rng.shuffle(labels)
    return labels


def generate_labeled_frames(config: PilotConfig, n: int,
                            rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Class-balanced raw power matrix (n, K) and labels (n,)."""
    labels = _balanced_labels(n, config.n_pilots + 1, rng)
    powers = np.stack([
        generate_frame(config, int(label), rng).powers for label in labels
    ])
    return powers, labels


def normalize_dataset(train_powers: np.ndarray,
                      test_powers: np.ndarray) -> tuple[np.ndarray, np.ndarray, NormStats]:
    """Z-score log-powers with statistics from the training set only."""
    log_train = np.log(train_powers)
    mean = log_train.mean(axis=0)
    std = log_train.std(axis=0)
    std = np.where(std == 0.0, 1.0, std)  # degenerate features pass through
    stats = NormStats(mean, std)
    x_train = (log_train - mean) / std
    x_test = (np.log(test_powers) - mean) / std
    return x_train, x_test, stats


def make_dataset(config: PilotConfig,
                 n_train: int = DEFAULT_N_TRAIN,
                 n_test: int = DEFAULT_N_TEST,
                 seed: int = 0):
    """(x_train, y_train, x_test, y_test, norm_stats), class-balanced."""
    rng = np.random.default_rng(seed)
    train_powers, y_train = generate_labeled_frames(config, n_train, rng)
    test_powers, y_test = generate_labeled_frames(config, n_test, rng)
    x_train, x_test, stats = normalize_dataset(train_powers, test_powers)
    return x_train, y_train, x_test, y_test, stats


# -- classifier ---------------------------------------------------------------


@dataclass
class ClassifierModel:
    weights: np.ndarray  # (n_classes, K)
    bias: np.ndarray  # (n_classes,)
    pilot_config: PilotConfig
    norm_stats: NormStats
    version: int = MODEL_VERSION
    seed: int = 0

    def __post_init__(self) -> None:
        n_classes = self.pilot_config.n_pilots + 1
        k = self.pilot_config.n_subcarriers
        if self.weights.shape != (n_classes, k) or self.bias.shape != (n_classes,):
            raise ValueError("model dimensions inconsistent with pilot config")
        if not (np.isfinite(self.weights).all() and np.isfinite(self.bias).all()):
            raise ValueError("model parameters must be finite")


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=-1, keepdims=True)


def loss_and_gradient(weights: np.ndarray, bias: np.ndarray,
                      x: np.ndarray, y: np.ndarray):
    """Mean cross-entropy and its analytic gradient for a batch.

    probs = softmax(W x + b); dW = mean((probs - onehot) x^T), db likewise.
    """
    if x.shape[0] == 0:
        raise ValueError("batch must be non-empty")
    if not np.isfinite(x).all():
        raise ValueError("non-finite features in batch")
    n, _ = x.shape
    n_classes = weights.shape[0]
    probs = softmax(x @ weights.T + bias)
    loss = float(-np.mean(np.log(probs[np.arange(n), y])))
    onehot = np.zeros((n, n_classes))
    onehot[np.arange(n), y] = 1.0
    delta = probs - onehot
    grad_w = delta.T @ x / n
    grad_b = delta.mean(axis=0)
    return loss, grad_w, grad_b


def train_model(config: PilotConfig,
                x_train: np.ndarray, y_train: np.ndarray,
                norm_stats: NormStats,
                learning_rate: float = DEFAULT_LEARNING_RATE,
                iterations: int = DEFAULT_ITERATIONS,
                seed: int = 0) -> tuple[ClassifierModel, list[float]]:
    """Full-batch gradient descent; returns the model and per-iteration losses."""
    n_classes = config.n_pilots + 1
    rng = np.random.default_rng(seed)
    weights = rng.normal(0.0, 0.01, (n_classes, config.n_subcarriers))
    bias = np.zeros(n_classes)
    history: list[float] = []
    for iteration in range(iterations):
        loss, grad_w, grad_b = loss_and_gradient(weights, bias, x_train, y_train)
        if not np.isfinite(loss):
            raise TrainingDivergedError(iteration)
        history.append(loss)
        weights -= learning_rate * grad_w
        bias -= learning_rate * grad_b
    model = ClassifierModel(weights=weights, bias=bias, pilot_config=config,
                            norm_stats=norm_stats, seed=seed)
    return model, history


def predict(model: ClassifierModel, frame: SpectrumFrame | np.ndarray):
    """(jam_class, probabilities); argmax ties break toward the lower class."""
    powers = frame.powers if isinstance(frame, SpectrumFrame) else frame
    if powers.shape != (model.pilot_config.n_subcarriers,):
        raise ValueError(
            f"frame length {powers.shape} does not match "
            f"K={model.pilot_config.n_subcarriers}"
        )
    x = features(powers, model.norm_stats)
    probs = softmax(model.weights @ x + model.bias)
    return int(np.argmax(probs)), probs


def accuracy(model: ClassifierModel, x: np.ndarray, y: np.ndarray) -> float:
    probs = softmax(x @ model.weights.T + model.bias)
    return float(np.mean(np.argmax(probs, axis=1) == y))


# -- model artifact codec ------------------------------------------------------


def encode_model(model: ClassifierModel) -> bytes:
    """Versioned binary blob with trailing CRC32; bitwise round-trip."""
    config = model.pilot_config
    label = config.label.encode("utf-8")
    parts = [
        MODEL_MAGIC,
        struct.pack(">HHHQH", model.version, config.n_subcarriers,
                    config.n_pilots, model.seed, len(label)),
        label,
        struct.pack(f">{config.n_pilots}H", *config.pilot_indices),
        np.ascontiguousarray(model.weights, dtype=">f8").tobytes(),
        np.ascontiguousarray(model.bias, dtype=">f8").tobytes(),
        np.ascontiguousarray(model.norm_stats.mean, dtype=">f8").tobytes(),
        np.ascontiguousarray(model.norm_stats.std, dtype=">f8").tobytes(),
    ]
    body = b"".join(parts)
    return body + struct.pack(">I", zlib.crc32(body))


def decode_model(blob: bytes) -> ClassifierModel:
    if len(blob) < 4 or blob[:4] != MODEL_MAGIC:
        raise BadMagicError("artifact does not start with the model magic")
    body, checksum = blob[:-4], blob[-4:]
    if struct.unpack(">I", checksum)[0] != zlib.crc32(body):
        raise ChecksumError("model artifact checksum mismatch")
    offset = 4
    try:
        version, k, p, seed, label_len = struct.unpack_from(">HHHQH", body, offset)
    except struct.error as exc:
        raise ModelFormatError(f"model artifact header truncated: {exc}") from exc
    if version != MODEL_VERSION:
        raise UnknownVersionError(f"unsupported model version {version}")
    offset += struct.calcsize(">HHHQH")
    label = body[offset : offset + label_len].decode("utf-8")
    offset += label_len
    pilot_indices = struct.unpack_from(f">{p}H", body, offset)
    offset += 2 * p
    n_classes = p + 1

    def take(count: int) -> np.ndarray:
        nonlocal offset
        size = count * 8
        if offset + size > len(body):
            raise ModelFormatError("model artifact truncated")
        array = np.frombuffer(body[offset : offset + size], dtype=">f8")
        offset += size
        return array.astype(np.float64)

    weights = take(n_classes * k).reshape(n_classes, k)
    bias = take(n_classes)
    mean = take(k)
    std = take(k)
    if offset != len(body):
        raise ModelFormatError("trailing bytes in model artifact")
    config = PilotConfig(k, tuple(int(i) for i in pilot_indices), label)
    return ClassifierModel(weights=weights, bias=bias, pilot_config=config,
                           norm_stats=NormStats(mean, std),
                           version=version, seed=seed)


# -- pilot relocation ----------------------------------------------------------


def select_new_pilots(current: PilotConfig, jammed_index: int,
                      seed: int = 0) -> PilotConfig:
    """Draw a fresh sorted pilot set disjoint from the current one."""
    if jammed_index not in current.pilot_indices:
        raise ValueError(f"{jammed_index} is not a current pilot")
    lo, hi = data_band(current.n_subcarriers)
    candidates = np.array([i for i in range(lo, hi)
                           if i not in current.pilot_indices])
    if len(candidates) < current.n_pilots:
        raise ValueError("not enough free subcarriers to relocate pilots")
    rng = np.random.default_rng(seed)
    chosen = np.sort(rng.choice(candidates, size=current.n_pilots, replace=False))
    return PilotConfig(current.n_subcarriers, tuple(int(i) for i in chosen),
                       current.label)


# -- base station and redeploy pipeline ---------------------------------------


@dataclass(frozen=True)
class RedeployTiming:
    data_transfer_s: float
    data_collection_s: float
    data_processing_s: float
    model_creation_s: float
    total_deployment_s: float

    def to_row(self, channel_size: str) -> dict:
        return {
            "channel_size": channel_size,
            "data_transfer_s": round(self.data_transfer_s, 6),
            "data_collection_s": round(self.data_collection_s, 6),
            "data_processing_s": round(self.data_processing_s, 6),
            "model_creation_s": round(self.model_creation_s, 6),
            "total_deployment_s": round(self.total_deployment_s, 6),
        }


@dataclass(frozen=True)
class JamEvent:
    frame_index: int
    jam_class: int


class BaseStation:
    """Holds the live (model, pilots) pair; swaps are atomic."""

    def __init__(self, model: ClassifierModel):
        self._state = (model, model.pilot_config)

    @property
    def model(self) -> ClassifierModel:
        return self._state[0]

    @property
    def pilots(self) -> PilotConfig:
        return self._state[1]

    def snapshot(self) -> tuple[ClassifierModel, PilotConfig]:
        return self._state

    def install(self, model: ClassifierModel) -> None:
        # single reference assignment: readers never observe a mixed pair
        self._state = (model, model.pilot_config)

    def detect_loop(self, frames: Iterable[SpectrumFrame],
                    debounce: int = DEFAULT_DEBOUNCE,
                    on_jam: Callable[[JamEvent], None] | None = None
                    ) -> list[JamEvent]:
        """Classify frames; emit one event per run of >= debounce jammed frames."""
        events: list[JamEvent] = []
        consecutive = 0
        armed = True
        for index, frame in enumerate(frames):
            jam_class, _ = predict(self.model, frame)
            if jam_class > 0:
                consecutive += 1
                if armed and consecutive >= debounce:
                    event = JamEvent(index, jam_class)
                    events.append(event)
                    armed = False
                    if on_jam is not None:
                        on_jam(event)
            else:
                consecutive = 0
                armed = True
        return events


def encode_model_request(pilots: PilotConfig, seed: int) -> bytes:
    return json.dumps(
        {
            "K": pilots.n_subcarriers,
            "pilot_indices": list(pilots.pilot_indices),
            "scenario_label": pilots.label,
            "seed": seed,
        },
        separators=(",", ":"),
    ).encode("utf-8")


def decode_model_request(payload: bytes) -> tuple[PilotConfig, int]:
    obj = json.loads(payload)
    config = PilotConfig(obj["K"], tuple(obj["pilot_indices"]),
                        obj["scenario_label"])
    return config, obj["seed"]


@dataclass
class FactoryTiming:
    data_collection_s: float = 0.0
    data_processing_s: float = 0.0
    model_creation_s: float = 0.0


class ModelFactoryService:
    """Twin-side factory: synthesizes data and trains a model on request."""

    def __init__(self, link: LinkEndpoint,
                 n_train: int = DEFAULT_N_TRAIN,
                 n_test: int = DEFAULT_N_TEST):
        self.link = link
        self.n_train = n_train
        self.n_test = n_test
        self.link.subscribe(TOPIC_DT_MODEL_REQUEST)
        self.last_timing: FactoryTiming | None = None
        self.last_request_transfer_s: float = 0.0
        self.last_accuracies: tuple[float, float] | None = None

    def build_model(self, pilots: PilotConfig, seed: int
                    ) -> tuple[ClassifierModel, FactoryTiming]:
        timing = FactoryTiming()
        rng = np.random.default_rng(seed)
        t0 = time.perf_counter()
        train_powers, y_train = generate_labeled_frames(pilots, self.n_train, rng)
        test_powers, y_test = generate_labeled_frames(pilots, self.n_test, rng)
        timing.data_collection_s = time.perf_counter() - t0
        t0 = time.perf_counter()
        x_train, x_test, stats = normalize_dataset(train_powers, test_powers)
        timing.data_processing_s = time.perf_counter() - t0
        t0 = time.perf_counter()
        model, _ = train_model(pilots, x_train, y_train, stats, seed=seed)
        timing.model_creation_s = time.perf_counter() - t0
        self.last_accuracies = (accuracy(model, x_train, y_train),
                                accuracy(model, x_test, y_test))
        return model, timing

    def serve_one(self, timeout: float | None = 1.0) -> bool:
        envelope = self.link.poll_envelope(timeout)
        if envelope is None or envelope.kind != "ModelRequest":
            return False
        self.last_request_transfer_s = max(
            0.0, (envelope.recv_at - envelope.sent_at) / 1e6
        )
        pilots, seed = decode_model_request(envelope.payload)
        model, timing = self.build_model(pilots, seed)
        self.last_timing = timing
        self.link.publish_envelope(
            TOPIC_DT_MODEL_ARTIFACT, "ModelArtifactMsg", encode_model(model)
        )
        return True

    def run(self, stop: threading.Event) -> None:
        while not stop.is_set():
            self.serve_one(timeout=0.1)


def run_redeploy_pipeline(bs: BaseStation, bs_link: LinkEndpoint,
                          factory: ModelFactoryService,
                          new_pilots: PilotConfig, seed: int,
                          timeout: float = 120.0
                          ) -> tuple[ClassifierModel, RedeployTiming]:
    """Request, build, ship, and atomically install a model for new pilots.

    The factory runs in-process (possibly on another thread), which is what
    lets this function assemble base-station transfer stamps and twin-side
    stage timings into one report. On failure the base station keeps its
    old model.
    """
    t_start = time.perf_counter()
    bs_link.publish_envelope(TOPIC_DT_MODEL_REQUEST, "ModelRequest",
                             encode_model_request(new_pilots, seed))
    deadline = time.monotonic() + timeout
    envelope = None
    while time.monotonic() < deadline:
        envelope = bs_link.poll_envelope(timeout=0.5)
        if envelope is not None and envelope.kind == "ModelArtifactMsg":
            break
        envelope = None
    if envelope is None:
        raise TimeoutError("no model artifact received from the twin")
    model = decode_model(envelope.payload)  # raises before any swap on corruption
    if model.pilot_config != new_pilots:
        raise ValueError("artifact pilots do not match the requested pilots")
    bs.install(model)
    total = time.perf_counter() - t_start
    factory_timing = factory.last_timing or FactoryTiming()
    artifact_transfer = max(0.0, (envelope.recv_at - envelope.sent_at) / 1e6)
    timing = RedeployTiming(
        data_transfer_s=factory.last_request_transfer_s + artifact_transfer,
        data_collection_s=factory_timing.data_collection_s,
        data_processing_s=factory_timing.data_processing_s,
        model_creation_s=factory_timing.model_creation_s,
        total_deployment_s=total,
    )
    return model, timing


def frame_stream(config_source: Callable[[], PilotConfig], jam_classes,
                 rng: np.random.Generator) -> Iterator[SpectrumFrame]:
    """Frames generated against the *current* pilot config each step."""
    for jam_class in jam_classes:
        yield generate_frame(config_source(), jam_class, rng)
