"""Corpus ingestion: manifests, log-mel frontend, segmentation, synthesis.

The manifest format is line-oriented text with a record-type prefix, one
record per line, tab-separated::

    speaker <TAB> speaker_id <TAB> domain(0|1) <TAB> intelligibility|-
    utt     <TAB> utterance_id <TAB> path <TAB> speaker_id [<TAB> l1,l2,...]

``path`` points at a feature file (see :mod:`advfhvae.arrayio`) or an
audio file to be passed through the frontend; a value of ``-`` means the
features are supplied in memory (synthetic corpora). Lines starting with
``#`` and blank lines are ignored.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .arrayio import read_feature_file
from .errors import ConfigurationError, ContractViolation, DataError

log = logging.getLogger(__name__)

CONTROL = 0
DYSARTHRIC = 1


@dataclass(frozen=True)
class SpeakerMeta:
    speaker_id: str
    domain_label: int
    intelligibility: float | None = None

    def __post_init__(self):
        if self.domain_label not in (CONTROL, DYSARTHRIC):
            raise ContractViolation(f"domain_label must be 0 or 1, got {self.domain_label}")
        if self.intelligibility is not None and not 0.0 <= self.intelligibility <= 100.0:
            raise ContractViolation(f"intelligibility out of [0,100]: {self.intelligibility}")


@dataclass(frozen=True)
class ManifestEntry:
    utterance_id: str
    path: str
    speaker_id: str
    labels: frozenset[int] = frozenset()


@dataclass
class CorpusManifest:
    entries: list[ManifestEntry]
    speakers: dict[str, SpeakerMeta]

    def __post_init__(self):
        seen = set()
        for e in self.entries:
            if e.utterance_id in seen:
                raise DataError(f"duplicate utterance_id {e.utterance_id!r}")
            seen.add(e.utterance_id)
            if e.speaker_id not in self.speakers:
                raise DataError(f"utterance {e.utterance_id!r}: unknown speaker {e.speaker_id!r}")

    def domain_of(self, entry: ManifestEntry) -> int:
        return self.speakers[entry.speaker_id].domain_label

    def subset(self, keep) -> "CorpusManifest":
        """New manifest with only the entries for which ``keep(entry)`` is true."""
        entries = [e for e in self.entries if keep(e)]
        speakers = {e.speaker_id: self.speakers[e.speaker_id] for e in entries}
        return CorpusManifest(entries, speakers)


def write_manifest(manifest: CorpusManifest, path) -> None:
    lines = []
    for spk in sorted(manifest.speakers.values(), key=lambda s: s.speaker_id):
        intel = "-" if spk.intelligibility is None else repr(float(spk.intelligibility))
        lines.append(f"speaker\t{spk.speaker_id}\t{spk.domain_label}\t{intel}")
    for e in manifest.entries:
        row = f"utt\t{e.utterance_id}\t{e.path}\t{e.speaker_id}"
        if e.labels:
            row += "\t" + ",".join(str(l) for l in sorted(e.labels))
        lines.append(row)
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path) -> CorpusManifest:
    speakers: dict[str, SpeakerMeta] = {}
    entries: list[ManifestEntry] = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split("\t")
        kind = parts[0]
        try:
            if kind == "speaker":
                _, sid, dom, intel = parts
                speakers[sid] = SpeakerMeta(
                    sid, int(dom), None if intel == "-" else float(intel)
                )
            elif kind == "utt":
                labels = frozenset()
                if len(parts) == 5 and parts[4]:
                    labels = frozenset(int(t) for t in parts[4].split(","))
                entries.append(ManifestEntry(parts[1], parts[2], parts[3], labels))
            else:
                raise DataError(f"unknown record type {kind!r}")
        except (ValueError, IndexError) as exc:
            raise DataError(f"{path}:{lineno}: malformed manifest line: {line!r}") from exc
    return CorpusManifest(entries, speakers)


# ---------------------------------------------------------------------------
# Frontend
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FrontendConfig:
    """Log-mel frontend. Frame count follows T = 1 + floor((samples - window) / hop)."""

    sample_rate: int = 16000
    window_ms: float = 25.0
    hop_ms: float = 10.0
    n_mels: int = 80
    fmin: float = 0.0
    fmax: float = 8000.0
    log_floor: float = 1e-10

    @property
    def window_samples(self) -> int:
        return int(round(self.sample_rate * self.window_ms / 1000.0))

    @property
    def hop_samples(self) -> int:
        return int(round(self.sample_rate * self.hop_ms / 1000.0))


def _hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def _mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_mels: int, n_fft: int, sample_rate: int, fmin: float, fmax: float) -> np.ndarray:
    """Triangular mel filterbank, shape (n_mels, n_fft // 2 + 1)."""
    mel_pts = np.linspace(_hz_to_mel(fmin), _hz_to_mel(fmax), n_mels + 2)
    hz_pts = _mel_to_hz(mel_pts)
    bins = np.floor((n_fft + 1) * hz_pts / sample_rate).astype(int)
    fb = np.zeros((n_mels, n_fft // 2 + 1))
    for m in range(1, n_mels + 1):
        lo, ctr, hi = bins[m - 1], bins[m], bins[m + 1]
        for k in range(lo, ctr):
            if ctr > lo:
                fb[m - 1, k] = (k - lo) / (ctr - lo)
        for k in range(ctr, hi):
            if hi > ctr:
                fb[m - 1, k] = (hi - k) / (hi - ctr)
    return fb


def compute_logmel(
    waveform: np.ndarray,
    cfg: FrontendConfig = FrontendConfig(),
    sample_rate: int | None = None,
) -> np.ndarray:
    """Log mel-band energies, shape (T, n_mels), 10 ms frame advance by default."""
    waveform = np.asarray(waveform, dtype=np.float64).squeeze()
    if waveform.ndim != 1:
        raise ConfigurationError("only mono audio is supported")
    if sample_rate is not None and sample_rate != cfg.sample_rate:
        raise ConfigurationError(
            f"audio sample rate {sample_rate} != configured {cfg.sample_rate}; no resampler available"
        )
    if waveform.size == 0:
        raise DataError("empty audio")
    win, hop = cfg.window_samples, cfg.hop_samples
    if waveform.size < win:
        return np.zeros((0, cfg.n_mels), dtype=np.float32)
    n_frames = 1 + (waveform.size - win) // hop
    n_fft = 1 << (win - 1).bit_length()
    window = np.hamming(win)
    idx = hop * np.arange(n_frames)[:, None] + np.arange(win)[None, :]
    frames = waveform[idx] * window
    spec = np.abs(np.fft.rfft(frames, n=n_fft, axis=1)) ** 2
    fb = mel_filterbank(cfg.n_mels, n_fft, cfg.sample_rate, cfg.fmin, cfg.fmax)
    energies = spec @ fb.T
    return np.log(np.maximum(energies, cfg.log_floor)).astype(np.float32)


# ---------------------------------------------------------------------------
# Segmentation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SegmentRecord:
    x: np.ndarray  # (seg_len, D)
    sequence_id: int
    domain_label: int
    frame_offset: int


def segment_utterance(
    feat: np.ndarray,
    seg_len: int = 20,
    shift: int = 8,
    sequence_id: int = 0,
    domain_label: int = CONTROL,
) -> list[SegmentRecord]:
    """Slice overlapping fixed-length segments at offsets 0, shift, 2*shift, ..."""
    if shift < 1:
        raise ContractViolation(f"shift must be >= 1, got {shift}")
    t = feat.shape[0]
    if t < seg_len:
        log.warning("utterance with %d frames < segment length %d dropped", t, seg_len)
        return []
    return [
        SegmentRecord(feat[off : off + seg_len].copy(), sequence_id, domain_label, off)
        for off in range(0, t - seg_len + 1, shift)
    ]


# ---------------------------------------------------------------------------
# Normalization
# ---------------------------------------------------------------------------


@dataclass
class NormStats:
    mean: np.ndarray
    std: np.ndarray


def fit_norm_stats(features: list[np.ndarray]) -> NormStats:
    stacked = np.concatenate([np.asarray(f, dtype=np.float64) for f in features], axis=0)
    mean = stacked.mean(axis=0)
    std = stacked.std(axis=0)
    zero = std == 0.0
    if zero.any():
        log.warning("%d zero-variance feature dims replaced by unit scale", int(zero.sum()))
        std = np.where(zero, 1.0, std)
    return NormStats(mean=mean, std=std)


def normalize_corpus(
    features: list[np.ndarray], stats: NormStats | None = None
) -> tuple[list[np.ndarray], NormStats]:
    """Per-dimension mean/variance normalization. Not idempotent: stats are
    fit on the input unless given, so applying twice rescales twice."""
    if stats is None:
        stats = fit_norm_stats(features)
    out = [((np.asarray(f, dtype=np.float64) - stats.mean) / stats.std).astype(np.float32) for f in features]
    return out, stats


def denormalize(frames: np.ndarray, stats: NormStats) -> np.ndarray:
    return (np.asarray(frames, dtype=np.float64) * stats.std + stats.mean).astype(np.float32)


# ---------------------------------------------------------------------------
# In-memory corpus
# ---------------------------------------------------------------------------


@dataclass
class Utterance:
    utterance_id: str
    features: np.ndarray  # (T, D)
    speaker: SpeakerMeta
    labels: frozenset[int] = frozenset()


@dataclass
class Corpus:
    utterances: list[Utterance]

    def __iter__(self):
        return iter(self.utterances)

    def __len__(self):
        return len(self.utterances)

    @property
    def feat_dim(self) -> int:
        return self.utterances[0].features.shape[1]

    def speakers(self) -> dict[str, SpeakerMeta]:
        return {u.speaker.speaker_id: u.speaker for u in self.utterances}

    def filter(self, keep) -> "Corpus":
        return Corpus([u for u in self.utterances if keep(u)])

    def control_only(self) -> "Corpus":
        return self.filter(lambda u: u.speaker.domain_label == CONTROL)

    def dysarthric_only(self) -> "Corpus":
        return self.filter(lambda u: u.speaker.domain_label == DYSARTHRIC)


def load_corpus(
    manifest: CorpusManifest,
    root=None,
    inline_features: dict[str, np.ndarray] | None = None,
    frontend: FrontendConfig = FrontendConfig(),
) -> Corpus:
    """Materialize manifest entries, sorted by utterance_id for worker-order independence."""
    utts = []
    for e in sorted(manifest.entries, key=lambda e: e.utterance_id):
        if e.path == "-":
            if inline_features is None or e.utterance_id not in inline_features:
                raise DataError(f"utterance {e.utterance_id!r} has inline features but none supplied")
            feats = inline_features[e.utterance_id]
        else:
            path = Path(root) / e.path if root is not None else Path(e.path)
            if path.suffix == ".fea":
                feats = read_feature_file(path)
            else:
                from scipy.io import wavfile

                rate, wav = wavfile.read(path)
                if wav.dtype.kind == "i":
                    wav = wav / float(np.iinfo(wav.dtype).max)
                feats = compute_logmel(wav, frontend, sample_rate=rate)
        utts.append(Utterance(e.utterance_id, np.asarray(feats, dtype=np.float32),
                              manifest.speakers[e.speaker_id], e.labels))
    return Corpus(utts)


# ---------------------------------------------------------------------------
# Synthetic two-factor corpus
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SynthConfig:
    """Two-factor synthetic corpus with a controllable domain nuisance.

    Each sequence (utterance) carries a sequence factor shared by its
    segments; each segment carries a content factor tied to a discrete
    intent label. Observations are fixed random linear maps of both
    factors; dysarthric speakers additionally get an additive shift in
    both factor channels, scaled by per-speaker severity, plus noise.
    """

    n_sequences: int = 320
    segments_per_sequence: int = 10
    seq_factor_dim: int = 8
    seg_factor_dim: int = 8
    domain_shift_strength: float = 3.0
    noise_std: float = 0.1
    seed: int = 0
    # artifact extensions beyond the two-factor core
    n_speakers: int = 40
    dysarthric_fraction: float = 0.4
    n_labels: int = 6
    obs_dim: int = 32
    seg_len: int = 20
    label_scale: float = 1.5
    speaker_scale: float = 1.5
    seq_jitter: float = 0.5
    content_jitter: float = 0.3
    max_labels_per_utterance: int = 2

    def __post_init__(self):
        for name in ("n_sequences", "segments_per_sequence", "seq_factor_dim",
                     "seg_factor_dim", "n_speakers", "n_labels", "obs_dim", "seg_len"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1")
        if self.domain_shift_strength < 0:
            raise ConfigurationError("domain_shift_strength must be >= 0")
        if self.noise_std <= 0:
            raise ConfigurationError("noise_std must be > 0")


def synth_generate(
    cfg: SynthConfig, return_factors: bool = False
) -> tuple[CorpusManifest, dict[str, np.ndarray]] | tuple[CorpusManifest, dict[str, np.ndarray], dict]:
    """Deterministic synthetic corpus; returns (manifest, utterance_id -> features).

    With ``return_factors`` the ground-truth generative state is appended:
    per-utterance sequence factors and per-speaker severities, for
    decodability checks.
    """
    rng = np.random.default_rng(cfg.seed)

    content_map = rng.normal(size=(cfg.obs_dim, cfg.seg_factor_dim)) / np.sqrt(cfg.seg_factor_dim)
    speaker_map = rng.normal(size=(cfg.obs_dim, cfg.seq_factor_dim)) / np.sqrt(cfg.seq_factor_dim)
    label_emb = rng.normal(size=(cfg.n_labels, cfg.seg_factor_dim))
    label_emb *= cfg.label_scale / np.linalg.norm(label_emb, axis=1, keepdims=True) * np.sqrt(cfg.seg_factor_dim)

    shift_c = rng.normal(size=cfg.seg_factor_dim)
    shift_c /= np.linalg.norm(shift_c)
    shift_s = rng.normal(size=cfg.seq_factor_dim)
    shift_s /= np.linalg.norm(shift_s)
    shift_obs = content_map @ shift_c + speaker_map @ shift_s

    n_dys = int(round(cfg.n_speakers * cfg.dysarthric_fraction))
    n_ctrl = cfg.n_speakers - n_dys
    speakers: dict[str, SpeakerMeta] = {}
    speaker_rows = []
    for k in range(n_ctrl):
        sid = f"ctrl{k:03d}"
        speakers[sid] = SpeakerMeta(sid, CONTROL, 100.0)
        speaker_rows.append((sid, 0.0))
    severities = np.linspace(0.35, 1.0, n_dys) if n_dys else np.zeros(0)
    for k in range(n_dys):
        sid = f"dys{k:03d}"
        intel = float(np.round(100.0 - 50.0 * severities[k], 1))
        speakers[sid] = SpeakerMeta(sid, DYSARTHRIC, intel)
        speaker_rows.append((sid, float(severities[k])))

    speaker_factor = {sid: cfg.speaker_scale * rng.normal(size=cfg.seq_factor_dim)
                      for sid, _ in speaker_rows}

    entries = []
    features: dict[str, np.ndarray] = {}
    seq_factors: dict[str, np.ndarray] = {}
    for i in range(cfg.n_sequences):
        sid, severity = speaker_rows[i % len(speaker_rows)]
        meta = speakers[sid]
        s = speaker_factor[sid] + cfg.seq_jitter * rng.normal(size=cfg.seq_factor_dim)
        n_active = int(rng.integers(1, cfg.max_labels_per_utterance + 1))
        labels = rng.choice(cfg.n_labels, size=n_active, replace=False)
        frames = np.empty((cfg.segments_per_sequence * cfg.seg_len, cfg.obs_dim))
        for n in range(cfg.segments_per_sequence):
            y = int(labels[n % n_active])
            c = label_emb[y] + cfg.content_jitter * rng.normal(size=cfg.seg_factor_dim)
            base = content_map @ c + speaker_map @ s
            if meta.domain_label == DYSARTHRIC:
                base = base + cfg.domain_shift_strength * severity * shift_obs
            block = base[None, :] + cfg.noise_std * rng.normal(size=(cfg.seg_len, cfg.obs_dim))
            frames[n * cfg.seg_len : (n + 1) * cfg.seg_len] = block
        uid = f"u{i:05d}"
        entries.append(ManifestEntry(uid, "-", sid, frozenset(int(l) for l in labels)))
        features[uid] = frames.astype(np.float32)
        seq_factors[uid] = s

    manifest = CorpusManifest(entries, speakers)
    if return_factors:
        factors = {
            "sequence_factor": seq_factors,
            "severity": {sid: sev for sid, sev in speaker_rows},
        }
        return manifest, features, factors
    return manifest, features
