"""Online estimation of transition probabilities via discounted Dirichlet counts.

The environment's transition structure is known up front: a successor
template enumerates the finitely many candidate successors of every
(state, action) pair. What is learned online is the probability of each
candidate. Each visited pair carries a vector of Dirichlet
hyperparameters; every observation discounts the whole vector by the
learning rate and adds one pseudo-count to the observed successor, so the
estimator tracks a drifting environment instead of converging on stale
history.
"""

from __future__ import annotations

import json
import struct
from typing import Callable, Protocol

import numpy as np

from .mdp import Action, State

SNAPSHOT_MAGIC = b"ADSH"
SNAPSHOT_VERSION = 1


class EstimatorError(Exception):
    pass


class TemplateMismatchError(EstimatorError):
    """An observed successor is not among the template's candidates.

    Signals that the assumed per-step structure is violated; callers
    should widen the template rather than silently accept the sample,
    because silent widening would desynchronise hyperparameter vectors.
    """


class AlreadyInitializedError(EstimatorError):
    pass


class SnapshotError(EstimatorError):
    pass


class VersionMismatchError(SnapshotError):
    pass


class SuccessorTemplate(Protocol):
    """Known finite-support structure of the transition function."""

    def candidates(self, state: State, action: Action) -> tuple[State, ...]:
        """Ordered, duplicate-free candidate successors of (state, action)."""
        ...


def lambda_schedule(step: int, base: float, horizon: float = 1000.0) -> float:
    """Learning rate at ``step`` for a schedule that approaches 1.

    ``lambda(step) = 1 - (1 - base) / (1 + step / horizon)``: equals
    ``base`` at step 0, increases monotonically, and tends to 1, which
    restores convergence in a stationary environment. A constant rate
    (no schedule) is what the traffic experiments use by default.
    """
    if step < 0:
        raise ValueError("step must be >= 0")
    if not 0.0 < base < 1.0:
        raise ValueError("base must be in (0, 1)")
    return 1.0 - (1.0 - base) / (1.0 + step / float(horizon))


def remap_table(table: "DirichletTable", new_template: SuccessorTemplate) -> "DirichletTable":
    """Re-key a table onto a widened template, preserving learned mass.

    Every existing candidate keeps its hyperparameter; candidates new to
    the wider template start at the symmetric prior. The warm-start
    ``prior_fn`` is dropped because it was derived for the old structure.
    """
    out = DirichletTable(
        new_template, lam=table.lam, prior_strength=table.prior_strength, prior_fn=None
    )
    for (s, a), alpha in table.alphas.items():
        old_cands = table.template.candidates(s, a)
        new_cands = new_template.candidates(s, a)
        pos = {c: i for i, c in enumerate(new_cands)}
        new_alpha = np.full(len(new_cands), table.prior_strength, dtype=np.float64)
        for cand, value in zip(old_cands, alpha.tolist()):
            try:
                new_alpha[pos[cand]] = value
            except KeyError:
                raise TemplateMismatchError(
                    f"widened template lost candidate {cand!r} of ({s!r}, {a!r})"
                ) from None
        out.alphas[(s, a)] = new_alpha
    return out


class DirichletTable:
    """Per-(state, action) Dirichlet hyperparameters over template candidates.

    The table is lazy: a key exists only once visited; estimates for
    unvisited keys are the symmetric-prior uniform distribution (or the
    ``prior_fn`` distribution when one is installed, e.g. a warm start
    computed from assumed traffic densities). ``lam`` may be reassigned
    between observations to follow a schedule.
    """

    def __init__(
        self,
        template: SuccessorTemplate,
        lam: float = 0.3,
        prior_strength: float = 1.0,
        prior_fn: Callable[[State, Action, tuple[State, ...]], np.ndarray] | None = None,
    ):
        if not 0.0 < lam <= 1.0:
            raise ValueError("lam must be in (0, 1]")
        if prior_strength <= 0.0:
            raise ValueError("prior_strength must be positive")
        self.template = template
        self.lam = float(lam)
        self.prior_strength = float(prior_strength)
        self.prior_fn = prior_fn
        self.alphas: dict[tuple[State, Action], np.ndarray] = {}

    def __len__(self) -> int:
        return len(self.alphas)

    def _prior_vector(self, s: State, a: Action, cands: tuple[State, ...]) -> np.ndarray:
        if self.prior_fn is not None:
            alpha = np.asarray(self.prior_fn(s, a, cands), dtype=np.float64).copy()
            if alpha.shape != (len(cands),):
                raise ValueError("prior_fn returned a vector of the wrong length")
            if not np.all(alpha > 0.0):
                raise ValueError("prior_fn must return strictly positive entries")
            return alpha
        return np.full(len(cands), self.prior_strength, dtype=np.float64)

    def init_prior(self, s: State, a: Action) -> np.ndarray:
        """Insert the prior hyperparameter vector for a fresh key."""
        key = (s, a)
        if key in self.alphas:
            raise AlreadyInitializedError(f"{key!r} already initialized")
        cands = self.template.candidates(s, a)
        alpha = self._prior_vector(s, a, cands)
        self.alphas[key] = alpha
        return alpha

    def observe(self, s: State, a: Action, succ: State) -> np.ndarray:
        """Discount the key's vector by ``lam`` and credit the observed successor.

        Auto-initializes unvisited keys. Raises
        :class:`TemplateMismatchError` when ``succ`` is not a candidate.
        """
        cands = self.template.candidates(s, a)
        try:
            j = cands.index(succ)
        except ValueError:
            raise TemplateMismatchError(
                f"successor {succ!r} not in template candidates of ({s!r}, {a!r})"
            ) from None
        key = (s, a)
        alpha = self.alphas.get(key)
        if alpha is None:
            alpha = self._prior_vector(s, a, cands)
            self.alphas[key] = alpha
        alpha *= self.lam
        alpha[j] += 1.0
        return alpha

    def estimate(self, s: State, a: Action) -> np.ndarray:
        """Probability estimate over ``candidates(s, a)``: normalized alphas.

        Unvisited keys yield the prior distribution without inserting an
        entry, so building an abstraction does not grow the table.
        """
        alpha = self.alphas.get((s, a))
        if alpha is None:
            cands = self.template.candidates(s, a)
            alpha = self._prior_vector(s, a, cands)
        return alpha / alpha.sum()

    def distribution(self, s: State, a: Action) -> dict[State, float]:
        """Estimate keyed by candidate state."""
        probs = self.estimate(s, a)
        return dict(zip(self.template.candidates(s, a), probs.tolist()))

    # -- persistence ---------------------------------------------------------

    @staticmethod
    def _encode_key(key: tuple[State, Action]) -> bytes:
        s, a = key
        return json.dumps([list(s), a], separators=(",", ":")).encode()

    @staticmethod
    def _decode_key(raw: bytes) -> tuple[State, Action]:
        s, a = json.loads(raw.decode())
        return tuple(s), a

    def snapshot(self) -> bytes:
        """Serialize to a versioned byte stream with bit-exact alphas."""
        out = bytearray()
        out += SNAPSHOT_MAGIC
        out += struct.pack("<Hdd I", SNAPSHOT_VERSION, self.lam, self.prior_strength, len(self.alphas))
        for key in sorted(self.alphas, key=self._encode_key):
            raw = self._encode_key(key)
            alpha = self.alphas[key]
            out += struct.pack("<I", len(raw))
            out += raw
            out += struct.pack("<I", len(alpha))
            out += struct.pack(f"<{len(alpha)}d", *alpha.tolist())
        return bytes(out)

    @classmethod
    def load(
        cls,
        data: bytes,
        template: SuccessorTemplate,
        prior_fn: Callable[[State, Action, tuple[State, ...]], np.ndarray] | None = None,
    ) -> "DirichletTable":
        """Rebuild a table from :meth:`snapshot` output.

        Candidate counts are re-checked against ``template``; a mismatch
        means the stream was written for a different structure.
        """
        try:
            if data[:4] != SNAPSHOT_MAGIC:
                raise SnapshotError("bad magic")
            version, lam, prior_strength, n_keys = struct.unpack_from("<Hdd I", data, 4)
            if version != SNAPSHOT_VERSION:
                raise VersionMismatchError(f"snapshot version {version}, expected {SNAPSHOT_VERSION}")
            table = cls(template, lam=lam, prior_strength=prior_strength, prior_fn=prior_fn)
            off = 4 + struct.calcsize("<Hdd I")
            for _ in range(n_keys):
                (key_len,) = struct.unpack_from("<I", data, off)
                off += 4
                key = cls._decode_key(data[off : off + key_len])
                off += key_len
                (n,) = struct.unpack_from("<I", data, off)
                off += 4
                alpha = np.array(struct.unpack_from(f"<{n}d", data, off), dtype=np.float64)
                off += 8 * n
                cands = template.candidates(*key)
                if len(cands) != n:
                    raise SnapshotError(
                        f"candidate count mismatch for {key!r}: snapshot {n}, template {len(cands)}"
                    )
                table.alphas[key] = alpha
            if off != len(data):
                raise SnapshotError(f"{len(data) - off} trailing bytes")
            return table
        except struct.error as exc:
            raise SnapshotError(f"truncated or malformed snapshot: {exc}") from exc
