"""Group-relative policy optimization over pivot-net selection.

The trainer snapshots the policy, samples a group of M pivot choices for one
cell, rewires and scores each candidate, standardizes the rewards within the
group into advantages, and takes K ascent steps on a clipped importance-ratio
surrogate regularized by an exact KL divergence against a fixed reference
policy.  The bundled policy is a softmax over an 8-dimensional feature map of
each pivot candidate; any sequence policy with the same sampling/log-prob
surface plugs in.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from typing import Protocol, runtime_checkable

import numpy as np

from .netlist import CellNetlist, normalize_orientation
from .permute import (
    DegenerateRegionError, InvalidPivotError, Network, PivotCandidate,
    build_graph, find_swap_region, list_valid_pivots, swap_net,
)
from .reward import RewardSource, ProxyReward, proxy_score, reward_of


POLICY_FORMAT_VERSION = 1
FEATURE_MAP_VERSION = 1
N_FEATURES = 8

TokenSeq = tuple[str, ...]


class GrpoError(Exception):
    pass


class NoValidPivotsError(GrpoError):
    pass


class ZeroOldProbError(GrpoError):
    pass


class SupportMismatchError(GrpoError):
    pass


class EmptyDatasetError(GrpoError):
    pass


# -----------------------------
# Prompts and pivot features
# -----------------------------

@dataclass(frozen=True)
class PivotPrompt:
    """A cell together with its valid pivot candidates and their features."""
    cell: CellNetlist
    candidates: tuple[PivotCandidate, ...]
    features: np.ndarray = field(repr=False)  # [n_candidates, N_FEATURES]

    def token_index(self, token: str) -> int | None:
        for i, c in enumerate(self.candidates):
            if c.net == token:
                return i
        return None


def pivot_features(cell: CellNetlist) -> tuple[tuple[PivotCandidate, ...], np.ndarray]:
    """Fixed 8-dim feature map per valid pivot: pull-network one-hot, pivot
    up/down degree, rewired-device count, region interior size, the number
    of same-gate device pairs facing each other across the pivot, and a
    bias term."""
    normalized = normalize_orientation(cell)
    graph = build_graph(normalized)
    candidates = tuple(list_valid_pivots(normalized))
    feats = np.zeros((len(candidates), N_FEATURES))
    by_name = {d.name: d for d in normalized.devices}
    for i, cand in enumerate(candidates):
        g = graph.of(cand.network)
        region = find_swap_region(graph, cand)
        ups = [by_name[name] for d, s, name in g.edges if s == cand.net]
        downs = [by_name[name] for d, s, name in g.edges if d == cand.net]
        cross = sum(1 for u in ups for d in downs if u.gate.name == d.gate.name)
        feats[i] = (
            1.0 if cand.network is Network.PULL_UP else 0.0,
            1.0 if cand.network is Network.PULL_DOWN else 0.0,
            float(len(ups)),
            float(len(downs)),
            float(len(region.delta)),
            float(len(region.interior)),
            float(cross),
            1.0,
        )
    return candidates, feats


def build_prompt(cell: CellNetlist) -> PivotPrompt:
    candidates, feats = pivot_features(cell)
    if not candidates:
        raise NoValidPivotsError(f"cell {cell.cell_name} has no valid pivots")
    return PivotPrompt(cell, candidates, feats)


# -----------------------------
# Policies
# -----------------------------

@runtime_checkable
class PolicyInterface(Protocol):
    def sample(self, prompt: PivotPrompt, rng: np.random.Generator) -> TokenSeq: ...
    def log_prob(self, prompt: PivotPrompt, tokens: TokenSeq) -> np.ndarray: ...
    def snapshot(self) -> "PolicyInterface": ...


@dataclass
class ToySoftmaxPolicy:
    """Softmax over pivot candidates scored by a linear feature map; token
    sequences have length one (the chosen pivot's net name)."""
    theta: np.ndarray  # [N_FEATURES]

    @classmethod
    def uniform(cls) -> "ToySoftmaxPolicy":
        return cls(np.zeros(N_FEATURES))

    def dist(self, prompt: PivotPrompt) -> np.ndarray:
        logits = prompt.features @ self.theta
        logits = logits - logits.max()
        p = np.exp(logits)
        return p / p.sum()

    def sample(self, prompt: PivotPrompt, rng: np.random.Generator) -> TokenSeq:
        i = int(rng.choice(len(prompt.candidates), p=self.dist(prompt)))
        return (prompt.candidates[i].net,)

    def log_prob(self, prompt: PivotPrompt, tokens: TokenSeq) -> np.ndarray:
        out = np.empty(len(tokens))
        for t, token in enumerate(tokens):
            i = prompt.token_index(token)
            out[t] = -np.inf if i is None else float(np.log(self.dist(prompt)[i]))
        return out

    def grad_log_prob(self, prompt: PivotPrompt, tokens: TokenSeq) -> np.ndarray:
        """d log pi(token) / d theta, one row per token position."""
        p = self.dist(prompt)
        mean_feat = p @ prompt.features
        rows = np.empty((len(tokens), N_FEATURES))
        for t, token in enumerate(tokens):
            i = prompt.token_index(token)
            if i is None:
                raise ZeroOldProbError(f"token {token!r} outside candidate set")
            rows[t] = prompt.features[i] - mean_feat
        return rows

    def snapshot(self) -> "ToySoftmaxPolicy":
        return ToySoftmaxPolicy(self.theta.copy())

    def greedy_token(self, prompt: PivotPrompt) -> TokenSeq:
        return (prompt.candidates[int(np.argmax(self.dist(prompt)))].net,)


def save_policy(policy: ToySoftmaxPolicy, path: str):
    doc = {
        "format_version": POLICY_FORMAT_VERSION,
        "theta": policy.theta.tolist(),
        "feature_map_version": FEATURE_MAP_VERSION,
    }
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        json.dump(doc, f, sort_keys=True, separators=(",", ":"))
        f.write("\n")


def load_policy(path: str) -> ToySoftmaxPolicy:
    with open(path, encoding="utf-8") as f:
        doc = json.load(f)
    if doc.get("format_version") != POLICY_FORMAT_VERSION:
        raise ValueError(f"unknown policy format_version {doc.get('format_version')!r}")
    if doc.get("feature_map_version") != FEATURE_MAP_VERSION:
        raise ValueError("policy was trained against a different feature map")
    theta = np.asarray(doc["theta"], dtype=float)
    if theta.shape != (N_FEATURES,):
        raise ValueError(f"theta must have shape ({N_FEATURES},)")
    return ToySoftmaxPolicy(theta)


# -----------------------------
# Rollouts and the objective
# -----------------------------

@dataclass
class RolloutGroup:
    prompt: PivotPrompt
    tokens: list[TokenSeq]
    netlists: list[CellNetlist]
    rewards: list[float]
    advantages: list[float] | None = None


@dataclass
class GrpoConfig:
    group_size: int = 8        # M
    iterations: int = 200      # I
    inner_steps: int = 4       # K
    clip_range: float = 0.2    # lambda
    kl_coef: float = 0.05      # kappa
    adv_epsilon: float = 1e-8  # epsilon
    lr: float = 0.1
    seed: int = 0
    max_retries: int = 8

    def __post_init__(self):
        if self.group_size < 2:
            raise ValueError("group size M must be >= 2")
        if not 0.0 < self.clip_range < 1.0:
            raise ValueError("clip range must be in (0, 1)")
        if self.adv_epsilon <= 0.0:
            raise ValueError("advantage epsilon must be > 0")


def sample_group(policy_old, cell: CellNetlist, group_size: int,
                 reward_source: RewardSource, rng: np.random.Generator,
                 max_retries: int = 8,
                 log: list[str] | None = None) -> RolloutGroup:
    """Sample M pivots with replacement, rewire and score each.  Tokens that
    decode to an invalid pivot are resampled a bounded number of times (the
    re-prompt analog); exhausted slots are dropped with a warning."""
    prompt = build_prompt(cell)
    tokens: list[TokenSeq] = []
    cells: list[CellNetlist] = []
    rewards: list[float] = []
    for _ in range(group_size):
        for attempt in range(max_retries):
            seq = policy_old.sample(prompt, rng)
            try:
                rewired = swap_net(cell, seq[0])
            except (InvalidPivotError, DegenerateRegionError) as exc:
                if log is not None:
                    log.append(f"{cell.cell_name}: resample after {exc}")
                continue
            tokens.append(seq)
            cells.append(rewired)
            rewards.append(reward_of(reward_source, rewired))
            break
        else:
            if log is not None:
                log.append(f"{cell.cell_name}: slot dropped after {max_retries} retries")
    return RolloutGroup(prompt, tokens, cells, rewards)


def compute_advantages(rewards: list[float], epsilon: float) -> list[float]:
    """Standardize rewards within the group (population standard deviation)."""
    if len(rewards) < 2:
        raise ValueError("advantage standardization needs at least 2 rewards")
    arr = np.asarray(rewards, dtype=float)
    mu = arr.mean()
    sigma = arr.std()
    return list((arr - mu) / (sigma + epsilon))


def clipped_term(ratio: float, advantage: float, clip_range: float) -> float:
    if ratio <= 0.0:
        raise ValueError("importance ratio must be positive")
    clipped = min(max(ratio, 1.0 - clip_range), 1.0 + clip_range)
    return min(ratio * advantage, clipped * advantage)


def is_ratio(policy, policy_old, prompt: PivotPrompt, tokens: TokenSeq, t: int) -> float:
    """Per-token importance ratio, computed in log space."""
    lp = policy.log_prob(prompt, tokens)[t]
    lp_old = policy_old.log_prob(prompt, tokens)[t]
    if not np.isfinite(lp_old):
        raise ZeroOldProbError(f"token {tokens[t]!r} has zero old-policy probability")
    return float(np.exp(lp - lp_old))


def kl_penalty(policy, policy_ref, prompt: PivotPrompt) -> float:
    """Exact categorical KL(policy || reference) over the candidate set."""
    p = policy.dist(prompt)
    q = policy_ref.dist(prompt)
    if np.any((p > 0) & (q == 0)):
        raise SupportMismatchError("reference policy has zero mass on a live candidate")
    mask = p > 0
    return float(np.sum(p[mask] * np.log(p[mask] / q[mask])))


def _kl_gradient(policy: ToySoftmaxPolicy, policy_ref, prompt: PivotPrompt) -> np.ndarray:
    p = policy.dist(prompt)
    q = policy_ref.dist(prompt)
    mean_feat = p @ prompt.features
    log_ratio = np.log(p) - np.log(q)
    return (p * log_ratio) @ (prompt.features - mean_feat)


def grpo_objective(group: RolloutGroup, policy, policy_old, policy_ref,
                   clip_range: float, kl_coef: float) -> tuple[float, np.ndarray]:
    """Objective value and its exact ascent gradient over the policy's theta:
    mean over samples and token positions of the clipped surrogate minus the
    KL penalty."""
    if group.advantages is None:
        raise ValueError("group advantages not computed")
    prompt = group.prompt
    kl = kl_penalty(policy, policy_ref, prompt)
    dkl = _kl_gradient(policy, policy_ref, prompt)

    m = len(group.tokens)
    value = 0.0
    grad = np.zeros(N_FEATURES)
    for tokens, adv in zip(group.tokens, group.advantages):
        glp = policy.grad_log_prob(prompt, tokens)
        for t in range(len(tokens)):
            rho = is_ratio(policy, policy_old, prompt, tokens, t)
            value += (clipped_term(rho, adv, clip_range) - kl_coef * kl) / len(tokens)
            unclipped = rho * adv
            clipped = min(max(rho, 1.0 - clip_range), 1.0 + clip_range) * adv
            if unclipped <= clipped:
                grad += adv * rho * glp[t] / len(tokens)
            grad -= kl_coef * dkl / len(tokens)
    return value / m, grad / m


# -----------------------------
# Training and inference loops
# -----------------------------

@dataclass
class HistoryRow:
    iteration: int
    mean_reward: float
    objective: float
    kl: float
    accepted_pivot: str


@dataclass
class TrainPolicyResult:
    policy: ToySoftmaxPolicy
    history: list[HistoryRow]
    log: list[str]


def write_history_csv(history: list[HistoryRow], path: str):
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["iter", "mean_reward", "objective", "kl", "accepted_pivot"])
        for row in history:
            writer.writerow([row.iteration, f"{row.mean_reward:.6f}",
                             f"{row.objective:.6f}", f"{row.kl:.6f}", row.accepted_pivot])


def train_policy(dataset: list[CellNetlist], policy: ToySoftmaxPolicy,
                 policy_ref, reward_source: RewardSource,
                 config: GrpoConfig) -> TrainPolicyResult:
    """Outer loop: snapshot the policy, roll out a group on one sampled cell,
    standardize rewards, then K inner ascent steps.  Deterministic per seed."""
    if not dataset:
        raise EmptyDatasetError("training dataset is empty")
    rng = np.random.default_rng(config.seed)
    log: list[str] = []
    history: list[HistoryRow] = []

    for iteration in range(1, config.iterations + 1):
        policy_old = policy.snapshot()
        idx = int(rng.integers(len(dataset)))
        cell = dataset[idx]
        try:
            group = sample_group(policy_old, cell, config.group_size,
                                 reward_source, rng, config.max_retries, log)
        except NoValidPivotsError:
            log.append(f"iter {iteration}: {cell.cell_name} has no valid pivots, skipped")
            history.append(HistoryRow(iteration, float("nan"), 0.0, 0.0, ""))
            continue
        if len(group.rewards) < 2:
            log.append(f"iter {iteration}: {cell.cell_name} group too small, skipped")
            history.append(HistoryRow(iteration, float("nan"), 0.0, 0.0, ""))
            continue
        group.advantages = compute_advantages(group.rewards, config.adv_epsilon)

        value = kl = 0.0
        for _ in range(config.inner_steps):
            value, grad = grpo_objective(group, policy, policy_old, policy_ref,
                                         config.clip_range, config.kl_coef)
            policy.theta = policy.theta + config.lr * grad
        kl = kl_penalty(policy, policy_ref, group.prompt)
        best = int(np.argmax(group.rewards))
        history.append(HistoryRow(iteration, float(np.mean(group.rewards)),
                                  value, kl, group.tokens[best][0]))
    return TrainPolicyResult(policy, history, log)


@dataclass
class TraceStep:
    step: int
    proposed: str
    reward: float
    accepted: bool
    breaks_after: int


@dataclass
class OptimizationTrace:
    cell: CellNetlist
    steps: list[TraceStep]
    stop_reason: str

    @property
    def routable(self) -> bool:
        return proxy_score(self.cell).breaks == 0

    def to_json(self) -> str:
        doc = {
            "cell": self.cell.cell_name,
            "stop_reason": self.stop_reason,
            "steps": [
                {"step": s.step, "proposed": s.proposed, "reward": s.reward,
                 "accepted": s.accepted, "breaks_after": s.breaks_after}
                for s in self.steps
            ],
        }
        return json.dumps(doc, sort_keys=True, separators=(",", ":"))


def optimize_cell(cell: CellNetlist, policy, reward_source: RewardSource,
                  budget: int, mode: str = "greedy",
                  rng: np.random.Generator | None = None,
                  max_retries: int = 8) -> OptimizationTrace:
    """Inference loop: repeatedly propose a pivot, swap, and keep the result
    only on strict reward improvement.  Greedy mode scans candidates by
    descending policy probability; sample mode draws one proposal per round.
    Stops when the proxy reports zero diffusion breaks, nothing improves, or
    the round budget runs out."""
    if mode not in ("greedy", "sample"):
        raise ValueError(f"unknown mode {mode!r}")
    rng = rng or np.random.default_rng(0)
    current = normalize_orientation(cell)
    steps: list[TraceStep] = []
    stop = "budget"
    for round_no in range(budget):
        if proxy_score(current).breaks == 0:
            stop = "routable"
            break
        try:
            prompt = build_prompt(current)
        except NoValidPivotsError:
            stop = "no-pivots"
            break
        current_reward = reward_of(reward_source, current)

        if mode == "greedy":
            order = np.argsort(-policy.dist(prompt), kind="stable")
            accepted = False
            for i in order:
                net = prompt.candidates[int(i)].net
                candidate_cell = swap_net(current, net)
                r = reward_of(reward_source, candidate_cell)
                ok = r > current_reward
                steps.append(TraceStep(round_no, net, r, ok,
                                       proxy_score(candidate_cell).breaks))
                if ok:
                    current = candidate_cell
                    accepted = True
                    break
            if not accepted:
                stop = "no-improvement"
                break
        else:
            seq = None
            for _ in range(max_retries):
                trial = policy.sample(prompt, rng)
                if prompt.token_index(trial[0]) is not None:
                    seq = trial
                    break
            if seq is None:
                stop = "no-pivots"
                break
            candidate_cell = swap_net(current, seq[0])
            r = reward_of(reward_source, candidate_cell)
            ok = r > current_reward
            steps.append(TraceStep(round_no, seq[0], r, ok,
                                   proxy_score(candidate_cell).breaks))
            if ok:
                current = candidate_cell
    else:
        stop = "routable" if proxy_score(current).breaks == 0 else "budget"
    return OptimizationTrace(current, steps, stop)
