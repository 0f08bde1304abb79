"""Synthetic audio-event world.

Provides deterministic spectrogram rendering for five event kinds, a closed
prompt grammar with tokenizer and frozen text embeddings, a small trained
event classifier (used by metrics and the bootstrap filter), and the edit
test-set builder.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError, NotFittedError
from .layers import (
    clip_grads_,
    conv2d_backward,
    conv2d_forward,
    linear_backward,
    linear_forward,
    sigmoid,
    silu_backward,
    silu_forward,
)
from .rng import rng_for, seed_for

EVENT_KINDS = ("tone", "chirp", "noise_burst", "pulse_train", "sweep")

KIND_PHRASES = {
    "tone": "tone",
    "chirp": "chirp",
    "noise_burst": "noise burst",
    "pulse_train": "pulse train",
    "sweep": "sweep",
}

# adjective -> (intensity multiplier, duration multiplier)
ADJECTIVES = {
    "loud": (1.6, 1.0),
    "soft": (0.4, 1.0),
    "long": (1.0, 1.5),
    "short": (1.0, 0.5),
}

# Closed vocabulary; id 0 is the pad word (empty string), so tokenize(" ")
# yields the all-pad sequence whose embedding is the null conditioning.
VOCABULARY = (
    "",
    "a",
    "and",
    "tone",
    "chirp",
    "noise",
    "burst",
    "pulse",
    "train",
    "sweep",
    "loud",
    "soft",
    "long",
    "short",
    "quiet",
    "brief",
    "steady",
    "bright",
    "dark",
    "low",
    "high",
    "slow",
    "fast",
    "the",
    "of",
    "with",
    "rising",
    "falling",
    "broad",
    "narrow",
    "deep",
    "thin",
    "sharp",
    "smooth",
    "faint",
    "strong",
    "double",
    "single",
    "then",
)

_GAUSS_SIGMA = 1.0
_GAUSS_CUTOFF = 3  # bins; pattern is exactly zero beyond this distance


@dataclass(frozen=True)
class WorldConfig:
    freq_bins: int = 32
    frames: int = 64
    max_tokens: int = 16
    embed_dim: int = 32
    seed: int = 0


@dataclass(frozen=True)
class EventSpec:
    kind: str
    pitch: int
    intensity: float
    onset: int
    duration: int

    def validate(self, config: WorldConfig) -> None:
        if self.kind not in EVENT_KINDS:
            raise ConfigError(f"unknown event kind {self.kind!r}")
        if not 0 <= self.pitch < config.freq_bins:
            raise ConfigError(f"pitch {self.pitch} outside [0, {config.freq_bins})")
        if not 0.0 < self.intensity <= 1.0:
            raise ConfigError(f"intensity {self.intensity} outside (0, 1]")
        if self.duration < 1:
            raise ConfigError(f"duration {self.duration} < 1")
        if not 0 <= self.onset < config.frames:
            raise ConfigError(f"onset {self.onset} outside [0, {config.frames})")
        if self.onset + self.duration > config.frames:
            raise ConfigError(
                f"event extends to frame {self.onset + self.duration} "
                f"beyond {config.frames}"
            )


def _freq_profile(center: np.ndarray, freq_bins: int) -> np.ndarray:
    """Truncated Gaussian cross-section around a (per-frame) center bin."""
    f = np.arange(freq_bins, dtype=np.float64)[:, None]
    d = f - center[None, :]
    prof = np.exp(-0.5 * (d / _GAUSS_SIGMA) ** 2)
    prof[np.abs(d) > _GAUSS_CUTOFF] = 0.0
    return prof


class World:
    """Immutable world: rendering, grammar, embeddings and (once fitted) the
    event classifier."""

    def __init__(self, config: WorldConfig | None = None):
        self.config = config or WorldConfig()
        self.vocab = VOCABULARY
        self._word_to_id = {w: i for i, w in enumerate(self.vocab)}
        rng = rng_for("world-embedding", self.config.seed)
        table = rng.standard_normal((len(self.vocab), self.config.embed_dim))
        table /= np.linalg.norm(table, axis=1, keepdims=True)
        table[0] = 0.0  # pad row: padded positions add nothing through attention
        self.embedding_table = table
        self.classifier: EventClassifier | None = None

    # ------------------------------------------------------------------
    # rendering
    # ------------------------------------------------------------------
    def render_event(self, spec: EventSpec, seed: int) -> np.ndarray:
        """Deterministic (freq_bins, frames) grid; linear in spec.intensity."""
        spec.validate(self.config)
        fb, fr = self.config.freq_bins, self.config.frames
        t0, t1 = spec.onset, spec.onset + spec.duration
        frames = np.arange(t0, t1)
        pattern = np.zeros((fb, fr), dtype=np.float64)
        if spec.kind == "tone":
            center = np.full(frames.shape, float(spec.pitch))
            pattern[:, t0:t1] = _freq_profile(center, fb)
        elif spec.kind == "chirp":
            # steep unit slope keeps the orientation locally unmistakable;
            # the event sampler caps durations so strokes stay unclipped
            center = np.clip(spec.pitch + 1.0 * (frames - t0), 0, fb - 1)
            pattern[:, t0:t1] = _freq_profile(center, fb)
        elif spec.kind == "sweep":
            center = np.clip(spec.pitch - 1.0 * (frames - t0), 0, fb - 1)
            pattern[:, t0:t1] = _freq_profile(center, fb)
        elif spec.kind == "noise_burst":
            rng = rng_for(
                "render",
                seed,
                spec.kind,
                spec.pitch,
                spec.onset,
                spec.duration,
            )
            pattern[:, t0:t1] = rng.uniform(0.55, 1.0, size=(fb, spec.duration))
        elif spec.kind == "pulse_train":
            period = 3 + spec.pitch // 8
            pattern[:, t0:t1:period] = 1.0
        return spec.intensity * pattern

    def compose_scene(self, events, seed: int):
        """Max-compose 1-3 events; returns (spectrogram, prompt token ids)."""
        if not events:
            raise ConfigError("compose_scene needs at least one event")
        if len(events) > 3:
            raise ConfigError("compose_scene supports at most 3 events")
        grids = [self.render_event(e, seed) for e in events]
        scene = grids[0]
        for g in grids[1:]:
            scene = np.maximum(scene, g)
        prompt = self.prompt_for(events)
        return scene, self.tokenize(prompt)

    def prompt_for(self, events, adjectives=None) -> str:
        """Grammar: 'a <kind>' phrases joined by 'and'; optional adjective per event."""
        parts = []
        for i, e in enumerate(events):
            adj = adjectives[i] if adjectives else None
            phrase = KIND_PHRASES[e.kind]
            parts.append(f"a {adj} {phrase}" if adj else f"a {phrase}")
        return " and ".join(parts)

    # ------------------------------------------------------------------
    # grammar / embedding
    # ------------------------------------------------------------------
    def tokenize(self, prompt: str) -> np.ndarray:
        words = prompt.split()
        if len(words) > self.config.max_tokens:
            raise ConfigError(
                f"prompt has {len(words)} words, limit {self.config.max_tokens}"
            )
        ids = np.zeros(self.config.max_tokens, dtype=np.int64)
        for i, w in enumerate(words):
            if w not in self._word_to_id:
                raise ConfigError(f"word {w!r} not in vocabulary")
            ids[i] = self._word_to_id[w]
        return ids

    def detokenize(self, tokens: np.ndarray) -> str:
        return " ".join(self.vocab[int(i)] for i in tokens if int(i) != 0)

    def embed(self, tokens: np.ndarray) -> np.ndarray:
        tokens = np.asarray(tokens)
        if tokens.ndim != 1 or tokens.shape[0] != self.config.max_tokens:
            raise ConfigError("token sequence must be padded to max_tokens")
        if tokens.min() < 0 or tokens.max() >= len(self.vocab):
            raise ConfigError("token id outside vocabulary")
        return self.embedding_table[tokens]

    def embed_text(self, prompt: str) -> np.ndarray:
        return self.embed(self.tokenize(prompt))

    def null_embedding(self) -> np.ndarray:
        return self.embed(self.tokenize(" "))

    def kinds_in_tokens(self, tokens: np.ndarray):
        """Event kinds named in a token sequence, in order of appearance."""
        words = [self.vocab[int(i)] for i in tokens if int(i) != 0]
        found = []
        i = 0
        while i < len(words):
            matched = False
            for kind, phrase in KIND_PHRASES.items():
                pw = phrase.split()
                if words[i : i + len(pw)] == pw:
                    found.append(kind)
                    i += len(pw)
                    matched = True
                    break
            if not matched:
                i += 1
        return tuple(found)

    def kind_token_positions(self, tokens: np.ndarray):
        """Map occurrence order -> tuple of token positions of each kind phrase."""
        words = [self.vocab[int(i)] for i in tokens]
        spans = []
        i = 0
        n = int(np.count_nonzero(tokens))
        while i < n:
            matched = False
            for kind, phrase in KIND_PHRASES.items():
                pw = phrase.split()
                if words[i : i + len(pw)] == pw:
                    spans.append((kind, tuple(range(i, i + len(pw)))))
                    i += len(pw)
                    matched = True
                    break
            if not matched:
                i += 1
        return spans

    # ------------------------------------------------------------------
    # classifier
    # ------------------------------------------------------------------
    def fit_classifier(self, steps: int = 3000, batch: int = 32, lr: float = 1.0,
                       seed: int = 0) -> "EventClassifier":
        clf = EventClassifier(self.config)
        clf.train(self, steps=steps, batch=batch, lr=lr, seed=seed)
        self.classifier = clf
        return clf

    def _require_classifier(self) -> "EventClassifier":
        if self.classifier is None or not self.classifier.fitted:
            raise NotFittedError("event classifier has not been trained")
        return self.classifier

    def classify(self, spectrogram: np.ndarray) -> np.ndarray:
        """Multi-label-normalized distribution over the five event kinds."""
        probs = self._require_classifier().event_probabilities(spectrogram)
        return probs / probs.sum(axis=-1, keepdims=True)

    def event_probabilities(self, spectrogram: np.ndarray) -> np.ndarray:
        """Raw per-kind sigmoid probabilities (multi-label)."""
        return self._require_classifier().event_probabilities(spectrogram)

    def classifier_features(self, spectrogram: np.ndarray) -> np.ndarray:
        """Penultimate classifier activations (dim 8), for Frechet distance."""
        return self._require_classifier().features(spectrogram)


class EventClassifier:
    """2-conv + global-pool + per-class sigmoid event detector, trained with
    the same manual-gradient machinery as the diffusion net."""

    FEATURE_DIM = 8

    def __init__(self, config: WorldConfig, dtype=np.float64):
        self.config = config
        self.dtype = dtype
        rng = rng_for("classifier-init", config.seed)
        k = len(EVENT_KINDS)

        def w(shape, fan_in):
            return (rng.standard_normal(shape) / np.sqrt(fan_in)).astype(dtype)

        self.params = {
            "conv1.w": w((12, 1, 3, 3), 9),
            "conv1.b": np.zeros(12, dtype=dtype),
            "conv2.w": w((24, 12, 3, 3), 108),
            "conv2.b": np.zeros(24, dtype=dtype),
            "fc1.w": w((24, self.FEATURE_DIM), 24),
            "fc1.b": np.zeros(self.FEATURE_DIM, dtype=dtype),
            "fc2.w": w((self.FEATURE_DIM, k), self.FEATURE_DIM),
            "fc2.b": np.zeros(k, dtype=dtype),
        }
        self.fitted = False

    def _forward(self, x: np.ndarray):
        p = self.params
        h1, c1 = conv2d_forward(x[:, None], p["conv1.w"], p["conv1.b"], stride=2)
        a1, ca1 = silu_forward(h1)
        h2, c2 = conv2d_forward(a1, p["conv2.w"], p["conv2.b"], stride=2)
        a2, ca2 = silu_forward(h2)
        pooled = a2.mean(axis=(2, 3))
        f0, cf1 = linear_forward(pooled, p["fc1.w"], p["fc1.b"])
        feat, caf = silu_forward(f0)
        logits, cf2 = linear_forward(feat, p["fc2.w"], p["fc2.b"])
        cache = (c1, ca1, c2, ca2, a2.shape, cf1, caf, cf2)
        return logits, feat, cache

    def _backward(self, dlogits: np.ndarray, cache):
        c1, ca1, c2, ca2, a2shape, cf1, caf, cf2 = cache
        grads = {}
        g, grads["fc2.w"], grads["fc2.b"] = linear_backward(dlogits, cf2)
        g = silu_backward(g, caf)
        g, grads["fc1.w"], grads["fc1.b"] = linear_backward(g, cf1)
        b, ch, hh, ww = a2shape
        g = np.broadcast_to(g[:, :, None, None] / (hh * ww), a2shape)
        g = silu_backward(g, ca2)
        g, grads["conv2.w"], grads["conv2.b"] = conv2d_backward(g, c2)
        g = silu_backward(g, ca1)
        _, grads["conv1.w"], grads["conv1.b"] = conv2d_backward(g, c1)
        return grads

    def train(self, world: World, steps: int, batch: int, lr: float, seed: int):
        cfg = self.config
        rng = rng_for("classifier-train", seed)
        k = len(EVENT_KINDS)
        for step in range(steps):
            xs = np.empty((batch, cfg.freq_bins, cfg.frames))
            ys = np.zeros((batch, k))
            for i in range(batch):
                n_events = int(rng.integers(1, 4)) if rng.random() < 0.5 else 1
                events = [random_event_spec(cfg, rng) for _ in range(n_events)]
                scene = np.zeros((cfg.freq_bins, cfg.frames))
                for e in events:
                    scene = np.maximum(
                        scene, world.render_event(e, seed_for(seed, step, i, e.kind))
                    )
                    ys[i, EVENT_KINDS.index(e.kind)] = 1.0
                # degradation augmentation: generated/edited spectrograms are
                # noisy, speckled and unevenly scaled compared to clean renders
                scene = scene * rng.uniform(0.6, 1.15)
                if rng.random() < 0.5:
                    scene = scene * (rng.random(scene.shape) <
                                     rng.uniform(0.6, 1.0))
                noisy = scene + rng.normal(0.0, rng.uniform(0.0, 0.15), scene.shape)
                xs[i] = np.clip(noisy, 0.0, None)
            logits, _, cache = self._forward(xs.astype(self.dtype))
            probs = sigmoid(logits)
            dlogits = (probs - ys) / (batch * k)
            grads = self._backward(dlogits.astype(self.dtype), cache)
            clip_grads_(grads, 1.0)
            for name, g in grads.items():
                self.params[name] -= lr * g
        self.fitted = True

    def _as_batch(self, spectrogram: np.ndarray):
        x = np.asarray(spectrogram, dtype=self.dtype)
        single = x.ndim == 2
        if single:
            x = x[None]
        return x, single

    def event_probabilities(self, spectrogram: np.ndarray) -> np.ndarray:
        if not self.fitted:
            raise NotFittedError("event classifier has not been trained")
        x, single = self._as_batch(spectrogram)
        logits, _, _ = self._forward(x)
        p = sigmoid(logits)
        return p[0] if single else p

    def features(self, spectrogram: np.ndarray) -> np.ndarray:
        if not self.fitted:
            raise NotFittedError("event classifier has not been trained")
        x, single = self._as_batch(spectrogram)
        _, feat, _ = self._forward(x)
        return feat[0] if single else feat


def save_world_config(path, config: WorldConfig) -> None:
    from .fileio import write_kv

    write_kv(path, {
        "freq_bins": config.freq_bins,
        "frames": config.frames,
        "max_tokens": config.max_tokens,
        "embed_dim": config.embed_dim,
        "seed": config.seed,
        "vocabulary": ",".join(VOCABULARY),
    })


def load_world_config(path) -> WorldConfig:
    from .fileio import read_kv

    kv = read_kv(path)
    vocab = tuple(kv.get("vocabulary", ",".join(VOCABULARY)).split(","))
    if vocab != VOCABULARY:
        raise ConfigError("world config vocabulary does not match this build")
    return WorldConfig(freq_bins=int(kv["freq_bins"]), frames=int(kv["frames"]),
                       max_tokens=int(kv["max_tokens"]),
                       embed_dim=int(kv["embed_dim"]), seed=int(kv["seed"]))


# pitch ranges keep rising/falling events clear of the grid edges, so a long
# chirp never saturates into a tone-like band
_PITCH_RANGES = {
    "tone": (4, 28),
    "chirp": (4, 13),
    "sweep": (19, 28),
    "noise_burst": (4, 28),
    "pulse_train": (4, 28),
}


def max_clean_duration(kind: str, pitch: int, freq_bins: int) -> int:
    """Longest duration before a diagonal event clips at the grid edge."""
    if kind == "chirp":
        return max(8, freq_bins - 3 - pitch)
    if kind == "sweep":
        return max(8, pitch - 2)
    return 10_000


def random_event_spec(config: WorldConfig, rng: np.random.Generator,
                      t_lo: int = 0, t_hi: int | None = None,
                      intensity_range=(0.55, 0.95)) -> EventSpec:
    """Random valid event confined to frames [t_lo, t_hi)."""
    t_hi = config.frames if t_hi is None else t_hi
    kind = EVENT_KINDS[int(rng.integers(len(EVENT_KINDS)))]
    lo, hi = _PITCH_RANGES[kind]
    scale = config.freq_bins / 32
    pitch = int(rng.integers(int(lo * scale), int(hi * scale)))
    span = t_hi - t_lo
    duration = int(rng.integers(max(8, span // 4), max(9, span - 2)))
    duration = min(duration, span, max_clean_duration(kind, pitch, config.freq_bins))
    onset = t_lo + int(rng.integers(0, span - duration + 1))
    intensity = float(rng.uniform(*intensity_range))
    return EventSpec(kind, pitch, intensity, onset, duration)


# ----------------------------------------------------------------------
# edit test set
# ----------------------------------------------------------------------
@dataclass
class EditCase:
    task: str
    source_events: tuple
    target_events: tuple
    source_prompt: str
    target_prompt: str
    source_scene: np.ndarray
    target_scene: np.ndarray
    mask: np.ndarray  # True on the region that must stay unedited
    edit_positions_source: tuple  # token positions of the edited phrase in P
    edit_positions_target: tuple  # token positions in P* (new words for refine)
    reweight_alpha: float | None
    seed: int


def _support(world: World, spec: EventSpec, seed: int) -> np.ndarray:
    unit = replace(spec, intensity=1.0)
    return world.render_event(unit, seed) > 0


def build_edit_testset(world: World, n: int, task: str, seed: int):
    """Two-event scenes with one event edited; records ground truth and the
    unedited-region mask."""
    if n < 1:
        raise ConfigError("n must be >= 1")
    if task not in ("replace", "refine", "reweight"):
        raise ConfigError(f"unknown task {task!r}")
    cfg = world.config
    cases = []
    for i in range(n):
        rng = rng_for("testset", task, seed, i)
        case_seed = seed_for("testset-render", task, seed, i)
        split = int(rng.integers(24, 41))
        kinds = list(EVENT_KINDS)
        rng.shuffle(kinds)
        k_keep, k_edit, k_new = kinds[0], kinds[1], kinds[2]

        inten = (0.35, 0.6) if task == "refine" else (0.55, 0.95)
        e_keep = replace(random_event_spec(cfg, rng, 0, split), kind=k_keep)
        e_edit = replace(
            random_event_spec(cfg, rng, split, cfg.frames, intensity_range=inten),
            kind=k_edit,
        )

        if task == "replace":
            lo, hi = _PITCH_RANGES[k_new]
            scale = cfg.freq_bins / 32
            new_pitch = int(rng.integers(int(lo * scale), int(hi * scale)))
            new_dur = min(e_edit.duration,
                          max_clean_duration(k_new, new_pitch, cfg.freq_bins))
            e_new = replace(e_edit, kind=k_new, pitch=new_pitch, duration=new_dur)
            adjectives = None
            alpha = None
        elif task == "refine":
            adj = list(ADJECTIVES)[int(rng.integers(len(ADJECTIVES)))]
            im, dm = ADJECTIVES[adj]
            new_dur = max(1, min(int(round(e_edit.duration * dm)),
                                 cfg.frames - e_edit.onset,
                                 max_clean_duration(k_edit, e_edit.pitch,
                                                    cfg.freq_bins)))
            e_new = replace(e_edit, intensity=min(1.0, e_edit.intensity * im),
                            duration=new_dur)
            adjectives = [None, adj]
            alpha = None
        else:  # reweight
            alpha = float(rng.uniform(0.25, 1.0))
            e_new = replace(e_edit, intensity=e_edit.intensity * alpha)
            adjectives = None

        source_events = (e_keep, e_edit)
        target_events = (e_keep, e_new)
        source_prompt = world.prompt_for(source_events)
        target_prompt = (source_prompt if task == "reweight"
                         else world.prompt_for(target_events, adjectives))
        src_tokens = world.tokenize(source_prompt)
        tgt_tokens = world.tokenize(target_prompt)

        keep_grid = world.render_event(e_keep, case_seed)
        src_scene = np.maximum(keep_grid, world.render_event(e_edit, case_seed))
        tgt_scene = np.maximum(keep_grid, world.render_event(e_new, case_seed))
        mask = ~(_support(world, e_edit, case_seed) | _support(world, e_new, case_seed))

        spans_src = dict(world.kind_token_positions(src_tokens))
        pos_src = spans_src[k_edit if task != "replace" else k_edit]
        if task == "replace":
            spans_tgt = dict(world.kind_token_positions(tgt_tokens))
            pos_tgt = spans_tgt[k_new]
        elif task == "refine":
            # the inserted adjective is the word just before the kind phrase
            spans_tgt = dict(world.kind_token_positions(tgt_tokens))
            pos_tgt = (spans_tgt[k_edit][0] - 1,)
        else:
            pos_tgt = pos_src
        cases.append(
            EditCase(
                task=task,
                source_events=source_events,
                target_events=target_events,
                source_prompt=source_prompt,
                target_prompt=target_prompt,
                source_scene=src_scene,
                target_scene=tgt_scene,
                mask=mask,
                edit_positions_source=tuple(pos_src),
                edit_positions_target=tuple(pos_tgt),
                reweight_alpha=alpha,
                seed=case_seed,
            )
        )
    return cases
