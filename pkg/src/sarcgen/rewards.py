"""Reward scorers: a synthetic marker oracle, an external NDJSON client, and
factual incongruity between image and text embeddings."""

from __future__ import annotations

import hashlib
import itertools
import json
import logging
import math
import queue
import shlex
import socket
import subprocess
import threading
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError, NumericError, ScorerUnavailableError
from .tokenizer import tokenize

log = logging.getLogger(__name__)

INCONGRUITY_MARKERS = ("love", "wonderful", "perfect", "amazing", "thrilled", "fantastic")
LITERAL_MARKERS = ("hate", "terrible", "awful", "annoying")
DEFAULT_TIMEOUT = 30.0


@dataclass(frozen=True)
class RewardScore:
    value: float
    scorer_id: str

    def __post_init__(self):
        if not math.isfinite(self.value) or not 0.0 <= self.value <= 1.0:
            raise NumericError(f"reward {self.value} from {self.scorer_id} outside [0, 1]")


@dataclass(frozen=True)
class ScorerSpec:
    kind: str  # synthetic_oracle | external_client | incongruity
    params: dict = field(default_factory=dict)

    @classmethod
    def parse(cls, spec: str) -> "ScorerSpec":
        """Parse ``synthetic[:saturation=N]``, ``incongruity``, ``cmd:<command>`` or ``tcp:host:port``."""
        head, _, rest = spec.partition(":")
        if head == "synthetic":
            params = {}
            for item in filter(None, rest.split(",")):
                key, _, val = item.partition("=")
                if key != "saturation":
                    raise ConfigError("scorer", f"unknown synthetic oracle option {key!r}")
                params[key] = int(val)
            return cls("synthetic_oracle", params)
        if head == "incongruity" and not rest:
            return cls("incongruity")
        if head == "cmd" and rest:
            return cls("external_client", {"command": rest})
        if head == "tcp" and rest:
            host, _, port = rest.rpartition(":")
            if not host or not port.isdigit():
                raise ConfigError("scorer", f"bad tcp endpoint {rest!r}")
            return cls("external_client", {"address": (host, int(port))})
        raise ConfigError("scorer", f"unrecognised scorer spec {spec!r}")


class SyntheticOracle:
    """Piecewise-linear stand-in for a sarcasm detector.

    score = clip((#incongruity markers - #literal markers) / saturation, 0, 1).
    Ignores the image.
    """

    def __init__(self, saturation: int = 3, incongruity_markers=INCONGRUITY_MARKERS,
                 literal_markers=LITERAL_MARKERS):
        if saturation < 1:
            raise ConfigError("saturation", "must be >= 1")
        self.saturation = saturation
        self.incongruity_markers = frozenset(incongruity_markers)
        self.literal_markers = frozenset(literal_markers)
        self.scorer_id = f"synthetic:saturation={saturation}"

    def marker_balance(self, text: str) -> int:
        toks = tokenize(text)
        return (sum(t in self.incongruity_markers for t in toks)
                - sum(t in self.literal_markers for t in toks))

    def score(self, text: str, image_ref=None) -> RewardScore:
        value = min(max(self.marker_balance(text) / self.saturation, 0.0), 1.0)
        return RewardScore(value, self.scorer_id)

    def score_batch(self, texts, image_refs=None) -> list[RewardScore]:
        return [self.score(t) for t in texts]

    def maximal_text(self) -> str:
        markers = sorted(self.incongruity_markers)
        return " ".join(itertools.islice(itertools.cycle(markers), self.saturation))

    def close(self):
        pass


class ExternalScorer:
    """Client for an out-of-process scorer speaking newline-delimited JSON.

    Request ``{"id", "text", "image_ref"}``, response ``{"id", "value"}``.
    The peer is either a child process (stdio) or a TCP server. Requests on
    one connection are serialised.
    """

    def __init__(self, command=None, address=None, timeout: float = DEFAULT_TIMEOUT):
        if (command is None) == (address is None):
            raise ConfigError("scorer", "give exactly one of command or address")
        self.timeout = timeout
        self._lock = threading.Lock()
        self._lines: queue.Queue = queue.Queue()
        self._ids = itertools.count()
        self._proc = None
        self._sock = None
        if command is not None:
            argv = shlex.split(command) if isinstance(command, str) else list(command)
            self.scorer_id = f"cmd:{command}"
            try:
                self._proc = subprocess.Popen(argv, stdin=subprocess.PIPE, stdout=subprocess.PIPE,
                                              text=True, encoding="utf-8", bufsize=1)
            except OSError as exc:
                raise ScorerUnavailableError(f"cannot start scorer {argv!r}: {exc}") from exc
            self._writer = self._proc.stdin
            reader = self._proc.stdout
        else:
            host, port = address
            self.scorer_id = f"tcp:{host}:{port}"
            try:
                self._sock = socket.create_connection((host, port), timeout=timeout)
            except OSError as exc:
                raise ScorerUnavailableError(f"cannot reach scorer at {host}:{port}: {exc}") from exc
            self._sock.settimeout(None)
            self._writer = self._sock.makefile("w", encoding="utf-8")
            reader = self._sock.makefile("r", encoding="utf-8")
        threading.Thread(target=self._pump, args=(reader,), daemon=True).start()

    def _pump(self, reader):
        try:
            for line in reader:
                self._lines.put(line)
        except (OSError, ValueError):
            pass
        self._lines.put(None)

    def score(self, text: str, image_ref=None, request_id=None) -> RewardScore:
        if not text:
            raise DataError("cannot score empty text")
        rid = str(next(self._ids)) if request_id is None else str(request_id)
        request = json.dumps({"id": rid, "text": text, "image_ref": image_ref}, ensure_ascii=False)
        with self._lock:
            try:
                self._writer.write(request + "\n")
                self._writer.flush()
            except (OSError, ValueError) as exc:
                raise ScorerUnavailableError(f"{self.scorer_id}: write failed: {exc}") from exc
            try:
                line = self._lines.get(timeout=self.timeout)
            except queue.Empty:
                raise ScorerUnavailableError(f"{self.scorer_id}: no response within {self.timeout}s") from None
        if line is None:
            raise ScorerUnavailableError(f"{self.scorer_id}: connection closed")
        try:
            reply = json.loads(line)
            value = float(reply["value"])
            if str(reply["id"]) != rid:
                raise ValueError(f"id {reply['id']!r} does not answer request {rid!r}")
            return RewardScore(value, self.scorer_id)
        except (ValueError, KeyError, TypeError, NumericError) as exc:
            raise ScorerUnavailableError(f"{self.scorer_id}: protocol violation: {exc}") from None

    def score_batch(self, texts, image_refs=None) -> list[RewardScore]:
        refs = image_refs if image_refs is not None else [None] * len(texts)
        return [self.score(t, r) for t, r in zip(texts, refs)]

    def close(self):
        if self._proc is not None:
            try:
                self._proc.stdin.close()
                self._proc.wait(timeout=5)
            except (OSError, subprocess.TimeoutExpired):
                self._proc.kill()
        if self._sock is not None:
            self._sock.close()


def factual_incongruity(image_embedding, text_embedding) -> float:
    """1 - max(cos(image, text), 0): 0 for aligned vectors, 1 for orthogonal or opposed."""
    u = np.asarray(image_embedding, dtype=np.float64)
    v = np.asarray(text_embedding, dtype=np.float64)
    if not (np.isfinite(u).all() and np.isfinite(v).all()):
        raise NumericError("non-finite embedding")
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        raise NumericError("zero embedding has no direction")
    cos = float(u @ v / (nu * nv))
    return 1.0 - min(max(cos, 0.0), 1.0)


class HashedTextEmbedder:
    """Sum of per-token Gaussian vectors seeded by the token hash."""

    def __init__(self, dim: int):
        self.dim = dim
        self._cache: dict[str, np.ndarray] = {}

    def _token_vector(self, token: str) -> np.ndarray:
        if token not in self._cache:
            seed = int.from_bytes(hashlib.sha256(token.encode("utf-8")).digest()[:8], "little")
            self._cache[token] = np.random.default_rng(seed).standard_normal(self.dim)
        return self._cache[token]

    def __call__(self, text: str) -> np.ndarray:
        toks = tokenize(text)
        if not toks:
            return np.zeros(self.dim)
        return np.sum([self._token_vector(t) for t in toks], axis=0)


class IncongruityScorer:
    """Scores a text by its factual incongruity with the image it accompanies."""

    scorer_id = "incongruity"

    def __init__(self, feature_store, text_embedder=None):
        self.features = feature_store
        self.text_embedder = text_embedder or HashedTextEmbedder(feature_store.dim)

    def image_embedding(self, image_ref: str) -> np.ndarray:
        return self.features.get(image_ref).grid.mean(axis=0)

    def score(self, text: str, image_ref=None) -> RewardScore:
        if image_ref is None:
            raise DataError("incongruity scoring needs an image_ref")
        value = factual_incongruity(self.image_embedding(image_ref), self.text_embedder(text))
        return RewardScore(value, self.scorer_id)

    def score_batch(self, texts, image_refs=None) -> list[RewardScore]:
        if image_refs is None:
            raise DataError("incongruity scoring needs image_refs")
        return [self.score(t, r) for t, r in zip(texts, image_refs)]

    def close(self):
        pass


def make_scorer(spec, feature_store=None, timeout: float = DEFAULT_TIMEOUT):
    if isinstance(spec, str):
        spec = ScorerSpec.parse(spec)
    if spec.kind == "synthetic_oracle":
        return SyntheticOracle(**spec.params)
    if spec.kind == "external_client":
        return ExternalScorer(command=spec.params.get("command"), address=spec.params.get("address"),
                              timeout=timeout)
    if spec.kind == "incongruity":
        if feature_store is None:
            raise ConfigError("scorer", "incongruity scorer needs image features")
        return IncongruityScorer(feature_store)
    raise ConfigError("scorer", f"unknown scorer kind {spec.kind!r}")
