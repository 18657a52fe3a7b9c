"""Softmax sequence models over enumerable (rationale, response) spaces.

A model assigns P(z, y | x) = exp(f_theta(x, z, y) - A(x, theta)) where the
logit f is linear in a feature map and A is the exact log partition
function.  Because spaces are enumerable, partition functions, conditional
token tables, KL divergences, and exact samples are all available in closed
form; everything is computed in log space.
"""

from __future__ import annotations

import io
import json
import math
from dataclasses import dataclass
from typing import Iterable

import numpy as np
import scipy.sparse as sp
from scipy.special import logsumexp

from .errors import FeatureMapMismatchError, OutOfSpaceError, RecordFormatError
from .tasks import GenerativeTask

BOS = -1  # left-padding marker inside n-gram windows, never a real token


class FeatureMap:
    """Linear featurization of (prompt, latent, response) triples.

    Subclasses fix `dim` and provide per-prompt logit vectors and adjoint
    products.  `weights` arguments are arbitrary signed vectors over the
    joint space, so the same adjoint serves expectations and gradients.
    """

    task: GenerativeTask
    dim: int
    supports_closed_form = False

    def logits(self, x_idx: int, theta: np.ndarray) -> np.ndarray:
        """f_theta(x, z, y) for all joint outcomes, in (z, y) index order."""
        raise NotImplementedError

    def adjoint(self, x_idx: int, weights: np.ndarray) -> np.ndarray:
        """Phi_x^T w: feature-space image of a joint-space vector."""
        raise NotImplementedError

    def feature_vector(self, x_idx: int, zy_idx: int) -> np.ndarray:
        """Dense phi(x, z, y) for a single joint outcome."""
        raise NotImplementedError

    def descriptor(self) -> dict:
        raise NotImplementedError

    def check_theta(self, theta: np.ndarray) -> None:
        if theta.shape != (self.dim,):
            raise FeatureMapMismatchError(
                f"theta has shape {theta.shape}, feature map needs ({self.dim},)"
            )
        if not np.all(np.isfinite(theta)):
            raise FeatureMapMismatchError("theta contains NaN or Inf entries")


class TabularFeatures(FeatureMap):
    """One indicator feature per (prompt, latent, response) triple.

    Fully expressive: any joint distribution is realizable, and the
    maximum-likelihood update has the closed form theta = log q.
    """

    supports_closed_form = True

    def __init__(self, task: GenerativeTask):
        self.task = task
        self.dim = task.n_prompts * task.n_joint

    def offset(self, x_idx: int) -> int:
        return x_idx * self.task.n_joint

    def logits(self, x_idx: int, theta: np.ndarray) -> np.ndarray:
        o = self.offset(x_idx)
        return theta[o : o + self.task.n_joint].copy()

    def adjoint(self, x_idx: int, weights: np.ndarray) -> np.ndarray:
        out = np.zeros(self.dim)
        o = self.offset(x_idx)
        out[o : o + self.task.n_joint] = weights
        return out

    def feature_vector(self, x_idx: int, zy_idx: int) -> np.ndarray:
        out = np.zeros(self.dim)
        out[self.offset(x_idx) + zy_idx] = 1.0
        return out

    def descriptor(self) -> dict:
        return {"kind": "tabular"}


class NgramFeatures(FeatureMap):
    """Token-window count features over the joint trajectory.

    Each feature counts one (prompt, position, window) pattern, where the
    window is the last `n` tokens ending at that position (BOS-padded).
    With `positional=False` the position collapses; with
    `per_prompt=False` all prompts share features.  The class is
    deliberately restricted: joint distributions whose coordinates
    interact beyond the window width are not realizable, so likelihood
    ascent has a nontrivial fixed point.
    """

    def __init__(
        self,
        task: GenerativeTask,
        n: int = 2,
        *,
        positional: bool = True,
        per_prompt: bool = True,
    ):
        if n < 1:
            raise ValueError("window width n must be >= 1")
        self.task = task
        self.n = n
        self.positional = positional
        self.per_prompt = per_prompt

        keys: dict[tuple, int] = {}
        rows: dict[int, list[tuple[int, int]]] = {}
        prompt_keys = range(task.n_prompts) if per_prompt else (0,)
        for px in prompt_keys:
            entries: list[tuple[int, int]] = []
            for k, seq in enumerate(task.joint_sequences):
                padded = (BOS,) * (n - 1) + seq
                for j in range(len(seq)):
                    window = padded[j : j + n]
                    key = (px, j if positional else -1, window)
                    fid = keys.setdefault(key, len(keys))
                    entries.append((k, fid))
            rows[px] = entries
        self.dim = len(keys)

        self._mats: dict[int, sp.csr_matrix] = {}
        n_joint = task.n_joint
        for px, entries in rows.items():
            data = np.ones(len(entries))
            r = np.fromiter((e[0] for e in entries), dtype=np.int64, count=len(entries))
            c = np.fromiter((e[1] for e in entries), dtype=np.int64, count=len(entries))
            mat = sp.coo_matrix((data, (r, c)), shape=(n_joint, self.dim)).tocsr()
            mat.sum_duplicates()
            self._mats[px] = mat

    def _mat(self, x_idx: int) -> sp.csr_matrix:
        return self._mats[x_idx if self.per_prompt else 0]

    def logits(self, x_idx: int, theta: np.ndarray) -> np.ndarray:
        return np.asarray(self._mat(x_idx) @ theta).ravel()

    def adjoint(self, x_idx: int, weights: np.ndarray) -> np.ndarray:
        return np.asarray(self._mat(x_idx).T @ weights).ravel()

    def feature_vector(self, x_idx: int, zy_idx: int) -> np.ndarray:
        return np.asarray(self._mat(x_idx)[zy_idx].todense()).ravel()

    def descriptor(self) -> dict:
        return {
            "kind": "ngram",
            "n": self.n,
            "positional": self.positional,
            "per_prompt": self.per_prompt,
        }


def feature_map_from_descriptor(task: GenerativeTask, desc: dict) -> FeatureMap:
    kind = desc.get("kind")
    if kind == "tabular":
        return TabularFeatures(task)
    if kind == "ngram":
        return NgramFeatures(
            task,
            int(desc["n"]),
            positional=bool(desc["positional"]),
            per_prompt=bool(desc["per_prompt"]),
        )
    raise RecordFormatError(f"unknown feature map descriptor {desc!r}")


class AutoregressiveView:
    """Exact token-by-token conditionals of a joint model at one prompt.

    Nodes are trajectory prefixes; each stores the available next tokens in
    ascending id order with their conditional log probabilities.  The
    product of conditionals along any complete trajectory reconstructs the
    joint log probability, and sampling walks the tree by inverse CDF, so a
    fixed generator state always yields the same trajectory.
    """

    def __init__(self, task: GenerativeTask, x_idx: int, joint_log_probs: np.ndarray):
        self.task = task
        self.x_idx = x_idx
        self._leaves = task.tokens_to_zy

        # Scalar log-space accumulation: this runs once per (sequence,
        # position) and per tree node, so it avoids array-call overhead.
        mass: dict[tuple[int, ...], dict[int, float]] = {}
        for seq, lp in zip(task.joint_sequences, joint_log_probs):
            if lp == -np.inf:
                continue
            lp = float(lp)
            for j, a in enumerate(seq):
                children = mass.setdefault(seq[:j], {})
                prev = children.get(a)
                if prev is None:
                    children[a] = lp
                else:
                    hi, lo = (prev, lp) if prev >= lp else (lp, prev)
                    children[a] = hi + math.log1p(math.exp(lo - hi))

        self._actions: dict[tuple[int, ...], np.ndarray] = {}
        self._logp: dict[tuple[int, ...], np.ndarray] = {}
        self._cum: dict[tuple[int, ...], np.ndarray] = {}
        for prefix, children in mass.items():
            acts = np.array(sorted(children), dtype=np.int64)
            child_mass = np.array([children[a] for a in acts])
            peak = float(child_mass.max())
            node_mass = peak + math.log(float(np.exp(child_mass - peak).sum()))
            logp = child_mass - node_mass
            self._actions[prefix] = acts
            self._logp[prefix] = logp
            with np.errstate(under="ignore"):
                self._cum[prefix] = np.cumsum(np.exp(logp))

    def prefixes(self) -> Iterable[tuple[int, ...]]:
        return self._actions.keys()

    def conditional(self, prefix: tuple[int, ...]) -> tuple[np.ndarray, np.ndarray]:
        """(actions, conditional log probs) available after `prefix`."""
        if prefix not in self._actions:
            raise OutOfSpaceError(f"prefix {prefix} has no continuation mass")
        return self._actions[prefix], self._logp[prefix]

    def token_logprob(self, prefix: tuple[int, ...], action: int) -> float:
        acts, logp = self.conditional(prefix)
        pos = np.searchsorted(acts, action)
        if pos >= len(acts) or acts[pos] != action:
            return -np.inf
        return float(logp[pos])

    def seq_logprob(self, tokens: tuple[int, ...]) -> float:
        total = 0.0
        for j, a in enumerate(tokens):
            lp = self.token_logprob(tokens[:j], a)
            if lp == -np.inf:
                return -np.inf
            total += lp
        return total

    def is_complete(self, tokens: tuple[int, ...]) -> bool:
        return tokens in self._leaves

    def _walk(self, pick) -> tuple[int, int]:
        prefix: tuple[int, ...] = ()
        while not self.is_complete(prefix):
            acts, logp = self.conditional(prefix)
            prefix = prefix + (int(acts[pick(prefix, logp)]),)
        return self._leaves[prefix]

    def sample(self, rng: np.random.Generator) -> tuple[int, int]:
        """One exact (z_idx, y_idx) draw via inverse CDF at every node."""

        def pick(prefix, logp):
            cum = self._cum[prefix]
            return min(int(np.searchsorted(cum, rng.random(), side="right")),
                       len(cum) - 1)

        return self._walk(pick)

    def greedy(self) -> tuple[int, int]:
        """Token-by-token argmax decode; ties break to the lowest token id."""
        return self._walk(lambda prefix, logp: int(np.argmax(logp)))


@dataclass
class LogitModel:
    """Linear-softmax joint model P(z, y | x) = exp(f - A).

    `theta` is copied on construction and treated as immutable; updates
    produce new models via `with_theta`.
    """

    features: FeatureMap
    theta: np.ndarray

    def __post_init__(self):
        self.theta = np.array(self.theta, dtype=np.float64)
        self.features.check_theta(self.theta)

    @property
    def task(self) -> GenerativeTask:
        return self.features.task

    def with_theta(self, theta: np.ndarray) -> "LogitModel":
        return LogitModel(self.features, theta)

    def logits(self, x_idx: int) -> np.ndarray:
        return self.features.logits(x_idx, self.theta)

    def log_partition(self, x_idx: int) -> float:
        """A(x, theta) = log sum over all (z, y) of exp f_theta."""
        if not 0 <= x_idx < self.task.n_prompts:
            raise OutOfSpaceError(f"prompt index {x_idx} out of range")
        return float(logsumexp(self.logits(x_idx)))

    def joint_log_probs(self, x_idx: int) -> np.ndarray:
        logits = self.features.logits(x_idx, self.theta)
        return logits - logsumexp(logits)

    def joint_probs(self, x_idx: int) -> np.ndarray:
        with np.errstate(under="ignore"):
            return np.exp(self.joint_log_probs(x_idx))

    def joint_logprob(self, x_idx: int, z_idx: int, y_idx: int) -> float:
        self.task.check_indices(x_idx, z_idx, y_idx)
        return float(self.joint_log_probs(x_idx)[self.task.zy_index(z_idx, y_idx)])

    def conditional_tables(self, x_idx: int) -> AutoregressiveView:
        if not 0 <= x_idx < self.task.n_prompts:
            raise OutOfSpaceError(f"prompt index {x_idx} out of range")
        return AutoregressiveView(self.task, x_idx, self.joint_log_probs(x_idx))

    def sample_joint(
        self,
        x_idx: int,
        rng: np.random.Generator,
        view: AutoregressiveView | None = None,
    ) -> tuple[int, int]:
        view = view if view is not None else self.conditional_tables(x_idx)
        return view.sample(rng)

    def greedy_joint(
        self, x_idx: int, view: AutoregressiveView | None = None
    ) -> tuple[int, int]:
        view = view if view is not None else self.conditional_tables(x_idx)
        return view.greedy()


def uniform_model(task: GenerativeTask, features: FeatureMap | None = None) -> LogitModel:
    features = features if features is not None else TabularFeatures(task)
    return LogitModel(features, np.zeros(features.dim))


def random_model(
    task: GenerativeTask,
    rng: np.random.Generator,
    scale: float = 0.5,
    features: FeatureMap | None = None,
) -> LogitModel:
    features = features if features is not None else TabularFeatures(task)
    return LogitModel(features, rng.normal(0.0, scale, features.dim))


def _require_same_task(a: LogitModel, b: LogitModel) -> None:
    if a.task is not b.task and (
        a.task.name != b.task.name
        or a.task.n_joint != b.task.n_joint
        or a.task.n_prompts != b.task.n_prompts
    ):
        raise FeatureMapMismatchError("models are defined over different tasks")


def kl_between(a: LogitModel, b: LogitModel, x_idx: int) -> float:
    """KL(P_a(.,.|x) || P_b(.,.|x)) summed over the joint space."""
    _require_same_task(a, b)
    p = a.joint_probs(x_idx)
    diff = a.joint_log_probs(x_idx) - b.joint_log_probs(x_idx)
    mask = p > 0.0
    return float(np.sum(p[mask] * diff[mask]))


def kl_identity_form(a: LogitModel, b: LogitModel, x_idx: int) -> float:
    """Same divergence via A_b - A_a + E_a[f_a - f_b].

    Algebraically identical to `kl_between`; computed from partition
    functions and logit expectations instead of probability ratios, so the
    two implementations cross-check each other.
    """
    _require_same_task(a, b)
    fa = a.logits(x_idx)
    fb = b.logits(x_idx)
    p = a.joint_probs(x_idx)
    return float(
        logsumexp(fb) - logsumexp(fa) + np.dot(p, fa - fb)
    )


# -- checkpoints ---------------------------------------------------------------

_CHECKPOINT_MAGIC = "latentlab-checkpoint v1"


def save_checkpoint(model: LogitModel, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        write_checkpoint(model, fh)


def write_checkpoint(model: LogitModel, fh: io.TextIOBase) -> None:
    """Plain-text weights: 17 significant digits round-trip float64 exactly."""
    fh.write(f"{_CHECKPOINT_MAGIC}\n")
    fh.write(f"task {model.task.name}\n")
    fh.write(f"features {json.dumps(model.features.descriptor(), sort_keys=True)}\n")
    fh.write(f"dim {model.features.dim}\n")
    for w in model.theta:
        fh.write(f"{w:.17g}\n")


def load_checkpoint(task: GenerativeTask, path) -> LogitModel:
    with open(path, "r", encoding="utf-8") as fh:
        return read_checkpoint(task, fh)


def read_checkpoint(task: GenerativeTask, fh: io.TextIOBase) -> LogitModel:
    lines = [ln.rstrip("\n") for ln in fh]
    if not lines or lines[0] != _CHECKPOINT_MAGIC:
        raise RecordFormatError("not a model checkpoint (bad magic line)")
    try:
        _, task_name = lines[1].split(" ", 1)
        _, desc_json = lines[2].split(" ", 1)
        _, dim_str = lines[3].split(" ", 1)
        dim = int(dim_str)
        weights = [float(v) for v in lines[4 : 4 + dim]]
    except (IndexError, ValueError) as exc:
        raise RecordFormatError(f"malformed checkpoint: {exc}") from exc
    if task_name != task.name:
        raise RecordFormatError(
            f"checkpoint belongs to task {task_name!r}, not {task.name!r}"
        )
    if len(weights) != dim:
        raise RecordFormatError(f"expected {dim} weights, found {len(weights)}")
    features = feature_map_from_descriptor(task, json.loads(desc_json))
    if features.dim != dim:
        raise RecordFormatError(
            f"feature map dimension {features.dim} disagrees with checkpoint {dim}"
        )
    return LogitModel(features, np.array(weights))
