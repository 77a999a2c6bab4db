"""
Deep symbolic regression over the expression token language.

An autoregressive controller proposes pre-order token sequences conditioned on the
(parent, sibling) context of each slot. Sequences that could not be completed within
the length limit are masked out during sampling, so every sample is a valid tree.
Training uses the risk-seeking policy gradient: only the top ε of each batch
contributes, weighted by its fitness above the (1 − ε) quantile.
"""

import json
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
import torch
from torch import nn
from tqdm import tqdm

from config import (
    DEFAULT_BATCH_SIZE,
    DEFAULT_ENTROPY_WEIGHT,
    DEFAULT_HALL_OF_FAME_SIZE,
    DEFAULT_LEARNING_RATE,
    DEFAULT_MAX_ITERATIONS,
    DEFAULT_RECURRENT_LEARNING_RATE,
    DEFAULT_RISK_QUANTILE,
    DEFAULT_STOP_FITNESS,
    DEFAULT_UNITS,
    MAX_EXPRESSION_LENGTH,
    UNIT_SCALE,
    SymccError,
    progress_enabled,
    require,
)
from expr_core import (
    REGRESSION_SYMBOLS,
    REGISTRY,
    VARIABLE,
    ExprTree,
    TokenLibrary,
    evaluate_batch,
    format_preorder,
    parse_preorder,
    parse_preorder_string,
    to_infix,
)
from policies import DEFAULT_MAPPING
from utils import convert_df_to_csv

logger = logging.getLogger(__name__)

CONTROLLERS = ("tabular", "recurrent")
CURVE_COLUMNS = ["iteration", "quantile", "batch_best", "batch_mean", "best_fitness", "elite_count",
                 "elapsed_s"]
MASKED_LOGIT = -1e9


class DegenerateDataset(SymccError):
    """Labels with zero variance: NRMSE is undefined."""


@dataclass(frozen=True)
class RegressionConfig:
    """Regression config section."""

    token_set: tuple[str, ...] = REGRESSION_SYMBOLS
    max_length: int = MAX_EXPRESSION_LENGTH
    batch_size: int = DEFAULT_BATCH_SIZE
    risk_quantile: float = DEFAULT_RISK_QUANTILE
    learning_rate: float | None = None
    max_iterations: int = DEFAULT_MAX_ITERATIONS
    entropy_weight: float = DEFAULT_ENTROPY_WEIGHT
    seed: int = 0
    controller: str = "tabular"
    hidden_size: int = 32
    time_budget_s: float | None = None
    units: str = DEFAULT_UNITS
    n_jobs: int = 1
    hall_of_fame_size: int = DEFAULT_HALL_OF_FAME_SIZE
    stop_fitness: float = DEFAULT_STOP_FITNESS

    def __post_init__(self):
        require(0.0 < self.risk_quantile < 1.0, "risk_quantile", "must be within (0, 1)")
        require(self.max_length >= 1, "max_length", "must be >= 1")
        require(self.batch_size >= 1, "batch_size", "must be >= 1")
        require(self.max_iterations >= 0, "max_iterations", "must be >= 0")
        require(self.entropy_weight >= 0, "entropy_weight", "must be >= 0")
        require(self.learning_rate is None or self.learning_rate > 0, "learning_rate", "must be > 0")
        require(self.controller in CONTROLLERS, "controller", f"expected one of {', '.join(CONTROLLERS)}")
        require(self.hidden_size >= 1, "hidden_size", "must be >= 1")
        require(self.time_budget_s is None or self.time_budget_s > 0, "time_budget_s", "must be > 0")
        require(self.units in UNIT_SCALE, "units", f"expected one of {', '.join(UNIT_SCALE)}")
        require(self.n_jobs >= 1, "n_jobs", "must be >= 1")
        require(self.hall_of_fame_size >= 1, "hall_of_fame_size", "must be >= 1")
        unknown = [s for s in self.token_set if s not in REGISTRY]
        require(not unknown, "token_set", f"unknown tokens {unknown}")
        require(any(REGISTRY[s].kind == VARIABLE for s in self.token_set), "token_set",
                "needs at least one variable")

    @property
    def resolved_learning_rate(self):
        if self.learning_rate is not None:
            return self.learning_rate
        return DEFAULT_LEARNING_RATE if self.controller == "tabular" else DEFAULT_RECURRENT_LEARNING_RATE

    def elite_count(self, batch_size=None):
        n = self.batch_size if batch_size is None else batch_size
        return max(1, math.ceil(self.risk_quantile * n - 1e-9))


class RegressionDataset:
    """Observation matrix X (n, 4) and regression labels y in [−1, 1]."""

    def __init__(self, X, y, units=DEFAULT_UNITS):
        self.X = np.ascontiguousarray(X, dtype=np.float64)
        self.y = np.asarray(y, dtype=np.float64)
        self.units = units
        if self.X.ndim != 2 or self.X.shape[1] != 4:
            raise ValueError(f"X must have shape (n, 4), got {self.X.shape}")
        if len(self.X) != len(self.y) or len(self.y) == 0:
            raise ValueError("X and y must be non-empty and the same length")
        if not (np.isfinite(self.X).all() and np.isfinite(self.y).all()):
            raise ValueError("dataset contains non-finite values")
        self.label_std = float(np.std(self.y))
        if self.label_std == 0.0:
            raise DegenerateDataset("labels have zero variance")

    def __len__(self):
        return len(self.y)

    @classmethod
    def from_experience(cls, dataset, mapping=None, units=DEFAULT_UNITS):
        """Labels are the inverse-mapped expert actions."""
        mapping = mapping or DEFAULT_MAPPING
        return cls(dataset.matrix(units), mapping.inverse(dataset.actions), units)


def _as_regression_dataset(dataset, units=DEFAULT_UNITS):
    if isinstance(dataset, RegressionDataset):
        return dataset
    return RegressionDataset.from_experience(dataset, units=units)


def fitness(tree, dataset):
    """1 / (1 + NRMSE); 0 when any row hit a non-finite intermediate."""
    data = _as_regression_dataset(dataset)
    values, degenerate = evaluate_batch(tree, data.X)
    if degenerate.any():
        return 0.0
    with np.errstate(all="ignore"):
        rmse = float(np.sqrt(np.mean((values - data.y) ** 2)))
    nrmse = rmse / data.label_std
    if not math.isfinite(nrmse):
        return 0.0
    return 1.0 / (1.0 + nrmse)


def masked_softmax(logits, mask):
    z = np.where(mask, logits, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    weights = np.where(mask, np.exp(z), 0.0)
    return weights / weights.sum(axis=-1, keepdims=True)


@dataclass
class SampleBatch:
    """
    Sampled sequences with the per-step context needed to replay them.

    `budgets[i, t]` is ℓ − t − deficit before step t; a token of arity k was
    allowed at that step iff k <= budget.
    """

    actions: np.ndarray
    parents: np.ndarray
    siblings: np.ndarray
    budgets: np.ndarray
    lengths: np.ndarray
    library: TokenLibrary = field(repr=False)

    def __len__(self):
        return len(self.lengths)

    def key(self, i):
        return tuple(self.actions[i, :self.lengths[i]].tolist())

    def tree(self, i):
        tokens = [self.library.tokens[a] for a in self.actions[i, :self.lengths[i]]]
        return parse_preorder(tokens, max_length=None)

    def step_mask(self, i):
        n = self.lengths[i]
        return self.library.arities[None, :] <= self.budgets[i, :n, None]


class Controller:
    """Autoregressive distribution over token sequences with structural masking."""

    def __init__(self, library, max_length):
        self.library = library
        self.max_length = max_length
        self.none_context = len(library)

    def initial_state(self, count):
        return None

    def step_logits(self, parents, siblings, state):
        """Unnormalised next-token scores for each context; returns (logits, state)."""
        raise NotImplementedError

    def update(self, batch, elite, advantages, entropy_weight):
        raise NotImplementedError

    def step_distribution(self, parents, siblings, budgets, state=None):
        logits, _ = self.step_logits(np.asarray(parents), np.asarray(siblings), state)
        mask = self.library.arities[None, :] <= np.asarray(budgets)[:, None]
        return masked_softmax(logits, mask)

    def sample(self, count, rng):
        """Draw `count` complete sequences; every one parses as a tree of length <= ℓ."""
        lib, ell = self.library, self.max_length
        none = self.none_context
        actions = np.full((count, ell), -1, dtype=np.int64)
        parents = np.full((count, ell), none, dtype=np.int64)
        siblings = np.full((count, ell), none, dtype=np.int64)
        budgets = np.zeros((count, ell), dtype=np.int64)
        lengths = np.zeros(count, dtype=np.int64)
        deficit = np.ones(count, dtype=np.int64)
        parent = np.full(count, none, dtype=np.int64)
        sibling = np.full(count, none, dtype=np.int64)
        # per sample: open operators as [token, children still to sample, last child root]
        frames = [[] for _ in range(count)]
        state = self.initial_state(count)

        for step in range(ell):
            alive = deficit > 0
            if not alive.any():
                break
            budget = ell - step - deficit
            logits, state = self.step_logits(parent, sibling, state)
            probs = masked_softmax(logits, lib.arities[None, :] <= budget[:, None])
            cdf = np.cumsum(probs, axis=1)
            threshold = rng.random(count)[:, None] * cdf[:, -1:]
            choice = np.argmax(cdf > threshold, axis=1)

            rows = np.flatnonzero(alive)
            actions[rows, step] = choice[rows]
            parents[rows, step] = parent[rows]
            siblings[rows, step] = sibling[rows]
            budgets[rows, step] = budget[rows]
            for i in rows:
                token = int(choice[i])
                arity = int(lib.arities[token])
                stack = frames[i]
                if stack:
                    top = stack[-1]
                    top[1] -= 1
                    top[2] = token
                    if top[1] == 0:
                        stack.pop()
                if arity:
                    stack.append([token, arity, none])
                deficit[i] += arity - 1
                lengths[i] += 1
                if stack:
                    parent[i], sibling[i] = stack[-1][0], stack[-1][2]
        return SampleBatch(actions, parents, siblings, budgets, lengths, lib)


class TabularController(Controller):
    """Logit table indexed by (parent, sibling); 'none' is the extra last index."""

    kind = "tabular"

    def __init__(self, library, max_length, learning_rate=DEFAULT_LEARNING_RATE):
        super().__init__(library, max_length)
        contexts = len(library) + 1
        self.logits = np.zeros((contexts, contexts, len(library)), dtype=np.float64)
        self.learning_rate = learning_rate

    def step_logits(self, parents, siblings, state):
        return self.logits[parents, siblings], state

    def update(self, batch, elite, advantages, entropy_weight):
        grad = np.zeros_like(self.logits)
        for i, advantage in zip(elite, advantages):
            n = batch.lengths[i]
            p, s, a = batch.parents[i, :n], batch.siblings[i, :n], batch.actions[i, :n]
            mask = batch.step_mask(i)
            probs = masked_softmax(self.logits[p, s], mask)
            g = -probs
            g[np.arange(n), a] += 1.0
            g *= advantage
            if entropy_weight:
                log_probs = np.log(np.where(mask, probs, 1.0))
                entropy = -(probs * log_probs).sum(axis=1, keepdims=True)
                g += entropy_weight * (-probs * (log_probs + entropy))
            np.add.at(grad, (p, s), g)
        self.logits += self.learning_rate * grad / max(1, len(elite))


class _ContextLSTM(nn.Module):
    def __init__(self, contexts, tokens, hidden_size, embedding_dim=8):
        super().__init__()
        self.parent_embedding = nn.Embedding(contexts, embedding_dim)
        self.sibling_embedding = nn.Embedding(contexts, embedding_dim)
        self.cell = nn.LSTMCell(2 * embedding_dim, hidden_size)
        self.head = nn.Linear(hidden_size, tokens)

    def forward(self, parents, siblings, state=None):
        x = torch.cat([self.parent_embedding(parents), self.sibling_embedding(siblings)], dim=-1)
        h, c = self.cell(x, state)
        return self.head(h), (h, c)


class RecurrentController(Controller):
    """LSTM over the sequence of (parent, sibling) contexts, trained with Adam."""

    kind = "recurrent"

    def __init__(self, library, max_length, learning_rate=DEFAULT_RECURRENT_LEARNING_RATE,
                 hidden_size=32, seed=0):
        super().__init__(library, max_length)
        torch.manual_seed(seed)
        self.net = _ContextLSTM(len(library) + 1, len(library), hidden_size).double()
        self.optimizer = torch.optim.Adam(self.net.parameters(), lr=learning_rate)

    def step_logits(self, parents, siblings, state):
        with torch.no_grad():
            logits, state = self.net(torch.as_tensor(parents), torch.as_tensor(siblings), state)
        return logits.numpy(), state

    def update(self, batch, elite, advantages, entropy_weight):
        elite = np.asarray(elite)
        n = int(batch.lengths[elite].max())
        parents = torch.as_tensor(batch.parents[elite, :n])
        siblings = torch.as_tensor(batch.siblings[elite, :n])
        actions = torch.as_tensor(np.maximum(batch.actions[elite, :n], 0))
        arities = torch.as_tensor(self.library.arities)
        masks = arities[None, None, :] <= torch.as_tensor(batch.budgets[elite, :n])[:, :, None]
        valid = torch.arange(n)[None, :] < torch.as_tensor(batch.lengths[elite])[:, None]

        state = None
        steps = []
        for t in range(n):
            logits, state = self.net(parents[:, t], siblings[:, t], state)
            steps.append(logits)
        logits = torch.stack(steps, dim=1).masked_fill(~masks, MASKED_LOGIT)
        log_probs = torch.log_softmax(logits, dim=-1)
        chosen = log_probs.gather(-1, actions.unsqueeze(-1)).squeeze(-1) * valid
        entropy = -(log_probs.exp() * log_probs).sum(dim=-1) * valid

        weights = torch.as_tensor(np.asarray(advantages, dtype=np.float64))
        loss = -(weights * chosen.sum(dim=1)).mean() - entropy_weight * entropy.sum(dim=1).mean()
        self.optimizer.zero_grad()
        loss.backward()
        self.optimizer.step()


def build_controller(cfg):
    library = TokenLibrary(cfg.token_set)
    if cfg.controller == "recurrent":
        return RecurrentController(library, cfg.max_length, cfg.resolved_learning_rate,
                                   cfg.hidden_size, cfg.seed)
    return TabularController(library, cfg.max_length, cfg.resolved_learning_rate)


def sample_expression(controller, cfg, rng):
    """One tree from the controller."""
    return controller.sample(1, rng).tree(0)


def risk_quantile(scores, epsilon):
    return float(np.quantile(scores, 1.0 - epsilon))


@dataclass(frozen=True)
class TrainStats:
    quantile: float
    elite_count: int
    batch_best: float
    batch_mean: float


def train_step(controller, batch, scores, cfg):
    """Risk-seeking update from the top ⌈ε·N⌉ samples with advantage fitness − quantile."""
    scores = np.asarray(scores, dtype=np.float64)
    k = cfg.elite_count(len(scores))
    quantile = risk_quantile(scores, cfg.risk_quantile)
    elite = np.argsort(-scores, kind="stable")[:k]
    advantages = np.maximum(scores[elite] - quantile, 0.0)
    controller.update(batch, elite, advantages, cfg.entropy_weight)
    return TrainStats(quantile, k, float(scores.max()), float(scores.mean()))


@dataclass(frozen=True)
class HallOfFameEntry:
    expression: ExprTree
    fitness: float
    iteration: int

    @property
    def complexity(self):
        return self.expression.length

    @property
    def infix(self):
        return to_infix(self.expression)

    def rank_key(self):
        return (-self.fitness, self.complexity, self.infix)

    def as_dict(self):
        return {
            "infix": self.infix,
            "preorder": format_preorder(self.expression),
            "fitness": self.fitness,
            "complexity": self.complexity,
            "iteration": self.iteration,
        }


class HallOfFame:
    """Best distinct expressions ranked by fitness, then token count."""

    def __init__(self, size=DEFAULT_HALL_OF_FAME_SIZE):
        self.size = size
        self._entries = {}
        # best entry per complexity, the raw material of the Pareto front
        self._by_complexity = {}
        self.best_history = []
        self.curve = []
        self.config = {}

    def consider(self, tree, score, iteration):
        key = tree.symbols
        if key not in self._entries:
            self._entries[key] = HallOfFameEntry(tree, float(score), iteration)
        current = self._by_complexity.get(tree.length)
        if current is None or score > current.fitness:
            self._by_complexity[tree.length] = HallOfFameEntry(tree, float(score), iteration)

    def trim(self):
        kept = sorted(self._entries.values(), key=HallOfFameEntry.rank_key)[:self.size]
        self._entries = {e.expression.symbols: e for e in kept}

    def record_iteration(self):
        best = self.best.fitness
        assert not self.best_history or best >= self.best_history[-1], "hall of fame lost its best entry"
        self.best_history.append(best)
        return best

    @property
    def entries(self):
        return sorted(self._entries.values(), key=HallOfFameEntry.rank_key)

    @property
    def best(self):
        return self.entries[0]

    def pareto_front(self):
        """Entries not dominated in (higher fitness, lower complexity), by complexity."""
        front = []
        for complexity in sorted(self._by_complexity):
            entry = self._by_complexity[complexity]
            if not front or entry.fitness > front[-1].fitness:
                front.append(entry)
        return front

    def training_curve(self):
        return pd.DataFrame(self.curve, columns=CURVE_COLUMNS)

    def as_dict(self):
        return {
            "entries": [e.as_dict() for e in self.entries],
            "pareto_front": [e.as_dict() for e in self.pareto_front()],
            "config": self.config,
        }

    def __len__(self):
        return len(self._entries)


class FitnessCache:
    """Memoised fitness by token sequence, optionally evaluated on a thread pool."""

    def __init__(self, dataset, n_jobs=1):
        self.dataset = dataset
        self.n_jobs = n_jobs
        self._scores = {}

    def score_batch(self, batch):
        keys = [batch.key(i) for i in range(len(batch))]
        pending = {}
        for i, key in enumerate(keys):
            if key not in self._scores and key not in pending:
                pending[key] = batch.tree(i)
        if pending:
            trees = list(pending.values())
            if self.n_jobs > 1:
                with ThreadPoolExecutor(max_workers=self.n_jobs) as pool:
                    scores = list(pool.map(lambda t: fitness(t, self.dataset), trees))
            else:
                scores = [fitness(t, self.dataset) for t in trees]
            self._scores.update(zip(pending, scores))
        return np.array([self._scores[k] for k in keys], dtype=np.float64)

    def __len__(self):
        return len(self._scores)


def run_regression(dataset, cfg=None):
    """
    Sample → score → update until `max_iterations` updates, the stop fitness or the
    wall-clock budget. Iteration 0 is the untrained controller's batch.
    """
    cfg = cfg or RegressionConfig()
    data = _as_regression_dataset(dataset, cfg.units)
    rng = np.random.default_rng(cfg.seed)
    controller = build_controller(cfg)
    cache = FitnessCache(data, cfg.n_jobs)
    hof = HallOfFame(cfg.hall_of_fame_size)
    hof.config = asdict(cfg)
    started = time.monotonic()
    logger.info("regression on %d rows with the %s controller (seed %d)", len(data), cfg.controller, cfg.seed)

    iterations = tqdm(range(cfg.max_iterations + 1), desc="regression", disable=not progress_enabled())
    for iteration in iterations:
        batch = controller.sample(cfg.batch_size, rng)
        scores = cache.score_batch(batch)
        for i in range(len(batch)):
            hof.consider(batch.tree(i), scores[i], iteration)
        hof.trim()
        best = hof.record_iteration()

        if iteration < cfg.max_iterations:
            stats = train_step(controller, batch, scores, cfg)
        else:
            stats = TrainStats(risk_quantile(scores, cfg.risk_quantile), cfg.elite_count(len(scores)),
                               float(scores.max()), float(scores.mean()))
        elapsed = time.monotonic() - started
        hof.curve.append((iteration, stats.quantile, stats.batch_best, stats.batch_mean, best,
                          stats.elite_count, elapsed))
        iterations.set_postfix(best=f"{best:.6f}", quantile=f"{stats.quantile:.4f}")

        if best >= cfg.stop_fitness:
            logger.info("stop fitness reached at iteration %d: %s", iteration, hof.best.infix)
            break
        if cfg.time_budget_s is not None and elapsed >= cfg.time_budget_s:
            logger.warning("time budget of %.1fs exhausted after iteration %d", cfg.time_budget_s, iteration)
            break

    logger.info("best expression %s (fitness %.6f, %d distinct scored)", hof.best.infix, hof.best.fitness, len(cache))
    return hof


def write_hall_of_fame(hof, out_dir):
    """hall_of_fame.json and training_curve.csv under `out_dir`."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    hof_path = out_dir / "hall_of_fame.json"
    hof_path.write_text(json.dumps(hof.as_dict(), indent=2))
    (out_dir / "training_curve.csv").write_bytes(convert_df_to_csv(hof.training_curve()))
    return hof_path


def load_hall_of_fame(path):
    """(ranked entries as dicts, units) from a hall-of-fame JSON."""
    try:
        data = json.loads(Path(path).read_text())
        entries = data["entries"]
    except (OSError, ValueError, KeyError) as e:
        raise SymccError(f"cannot read hall of fame {path}: {e}") from e
    if not entries:
        raise SymccError(f"hall of fame {path} is empty")
    return entries, data.get("config", {}).get("units", DEFAULT_UNITS)


def best_expression(path):
    entries, units = load_hall_of_fame(path)
    return parse_preorder_string(entries[0]["preorder"]), units
