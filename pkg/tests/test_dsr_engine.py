import json

import numpy as np
import pytest

from cc_env import ExperienceDataset
from config import ConfigInvalid
from dsr_engine import (
    HallOfFame,
    RecurrentController,
    RegressionConfig,
    RegressionDataset,
    DegenerateDataset,
    TabularController,
    best_expression,
    build_controller,
    fitness,
    masked_softmax,
    run_regression,
    sample_expression,
    train_step,
    write_hall_of_fame,
)
from expr_core import TokenLibrary, evaluate_batch, parse_infix, parse_preorder

LIBRARY = TokenLibrary()
FAST = dict(batch_size=100, max_iterations=5, hall_of_fame_size=10)


def controllers(max_length=32):
    return [
        TabularController(LIBRARY, max_length),
        RecurrentController(LIBRARY, max_length, hidden_size=8, seed=0),
    ]


# --- config ---

def test_config_defaults():
    cfg = RegressionConfig()
    assert cfg.max_length == 32
    assert cfg.batch_size == 500
    assert cfg.risk_quantile == 0.05
    assert cfg.elite_count() == 25
    assert cfg.resolved_learning_rate == 1.0


@pytest.mark.parametrize("changes, field", [
    ({"risk_quantile": 0.0}, "risk_quantile"),
    ({"risk_quantile": 1.0}, "risk_quantile"),
    ({"max_length": 0}, "max_length"),
    ({"batch_size": 0}, "batch_size"),
    ({"controller": "transformer"}, "controller"),
    ({"token_set": ("+", "cos")}, "token_set"),
    ({"units": "us"}, "units"),
])
def test_config_invariants(changes, field):
    with pytest.raises(ConfigInvalid) as info:
        RegressionConfig(**changes)
    assert info.value.field == field


# --- sampling ---

@pytest.mark.parametrize("controller", controllers(1), ids=["tabular", "recurrent"])
def test_length_one_samples_only_variables(controller, rng):
    batch = controller.sample(500, rng)
    assert (batch.lengths == 1).all()
    assert {LIBRARY.symbols[a] for a in batch.actions[:, 0]} <= {"x1", "x2", "x3", "x4"}


def test_binary_ops_masked_near_budget():
    controller = TabularController(LIBRARY, 32)
    none = controller.none_context
    probs = controller.step_distribution([none], [none], budgets=[1])[0]
    for symbol in ("+", "-", "*", "/"):
        assert probs[LIBRARY.index(symbol)] == 0.0
    assert probs[LIBRARY.index("cos")] > 0.0
    probs = controller.step_distribution([none], [none], budgets=[0])[0]
    assert probs[LIBRARY.index("cos")] == 0.0
    assert probs.sum() == pytest.approx(1.0)


@pytest.mark.parametrize("controller", controllers(), ids=["tabular", "recurrent"])
def test_sampling_contract(controller):
    rng = np.random.default_rng(41)
    batch = controller.sample(10_000, rng)
    assert len(batch) == 10_000
    assert batch.lengths.max() <= 32
    for i in range(len(batch)):
        tree = batch.tree(i)
        assert tree.length == batch.lengths[i]
        assert parse_preorder(tree.symbols).symbols == tree.symbols
        # every recorded step respected its budget
        step_arities = LIBRARY.arities[batch.actions[i, :tree.length]]
        assert (step_arities <= batch.budgets[i, :tree.length]).all()


@pytest.mark.parametrize("controller", controllers(), ids=["tabular", "recurrent"])
def test_step_distribution_normalised(controller):
    rng = np.random.default_rng(42)
    n = LIBRARY.size + 1
    parents = rng.integers(0, n, 200)
    siblings = rng.integers(0, n, 200)
    budgets = rng.integers(0, 31, 200)
    probs = controller.step_distribution(parents, siblings, budgets)
    assert (probs >= 0).all()
    assert np.allclose(probs.sum(axis=1), 1.0)
    masked = LIBRARY.arities[None, :] > budgets[:, None]
    assert (probs[masked] == 0).all()


def test_sample_expression_is_seeded():
    cfg = RegressionConfig(max_length=12)
    first = sample_expression(build_controller(cfg), cfg, np.random.default_rng(5))
    second = sample_expression(build_controller(cfg), cfg, np.random.default_rng(5))
    assert first.symbols == second.symbols
    assert first.length <= 12


def test_masked_softmax():
    probs = masked_softmax(np.array([[1.0, 2.0, 3.0]]), np.array([[True, False, True]]))
    assert probs[0, 1] == 0.0
    assert probs[0, 0] + probs[0, 2] == pytest.approx(1.0)


# --- fitness ---

def test_fitness_exact_match(cos_x2_dataset):
    assert fitness(parse_infix("cos(x2)"), cos_x2_dataset) == 1.0


def test_fitness_of_mean_predictor():
    X = np.ones((4, 4))
    X[:, 0] = [1.0, 2.0, 3.0, 4.0]
    y = np.array([0.0, 2.0, 0.0, 2.0])
    # x1 / x1 predicts the label mean everywhere: NRMSE = 1
    assert fitness(parse_infix("x1 / x1"), RegressionDataset(X, y)) == pytest.approx(0.5)


def test_fitness_degenerate_rows():
    X = np.array([[1e300, 1, 1, 0], [1.0, 1, 1, 0], [2.0, 1, 1, 0]])
    data = RegressionDataset(X, [0.0, 1.0, 0.5])
    assert fitness(parse_infix("(x1 * x1) * x1"), data) == 0.0


def test_degenerate_dataset():
    with pytest.raises(DegenerateDataset):
        RegressionDataset(np.ones((3, 4)), [0.5, 0.5, 0.5])


def test_fitness_formula():
    rng = np.random.default_rng(43)
    X = rng.uniform(0.1, 2.0, size=(200, 4))
    y = np.sin(X[:, 0])
    data = RegressionDataset(X, y)
    tree = parse_infix("cos(x1)")
    predictions, _ = evaluate_batch(tree, X)
    nrmse = np.sqrt(np.mean((predictions - y) ** 2)) / np.std(y)
    value = fitness(tree, data)
    assert 0.0 < value < 1.0
    assert value == pytest.approx(1.0 / (1.0 + nrmse), rel=1e-12)


def test_fitness_decreases_with_error():
    rng = np.random.default_rng(47)
    tree = parse_infix("x1")
    for _ in range(10_000):
        n = int(rng.integers(2, 12))
        y = rng.normal(size=n)
        y[0] += 1.0
        residual = rng.normal(size=n) + 1e-3
        small = rng.uniform(0.0, 10.0)
        large = small * rng.uniform(1.01, 10.0) + 1e-6
        scores = []
        for scale in (small, large):
            X = np.ones((n, 4))
            X[:, 0] = y + scale * residual
            scores.append(fitness(tree, RegressionDataset(X, y)))
        assert 0.0 < scores[1] < scores[0] <= 1.0


def test_from_experience_labels():
    rows = [(1e-4, 1e-3, 1.0, 0.0, 1.5), (1e-4, 2e-3, 2.0, 0.0, 0.8)]
    data = RegressionDataset.from_experience(ExperienceDataset(rows), units="ms")
    assert data.y.tolist() == pytest.approx([1.0, -1.0])
    assert data.X[1].tolist() == pytest.approx([0.1, 2.0, 2.0, 0.0])


# --- train_step ---

def test_elite_count():
    cfg = RegressionConfig()
    assert cfg.elite_count(500) == 25
    assert cfg.elite_count(10) == 1
    assert RegressionConfig(risk_quantile=0.1).elite_count(25) == 3


def test_identical_scores_leave_tabular_unchanged(rng):
    controller = TabularController(LIBRARY, 16)
    cfg = RegressionConfig(entropy_weight=0.0)
    batch = controller.sample(50, rng)
    before = controller.logits.copy()
    stats = train_step(controller, batch, np.full(50, 0.3), cfg)
    assert np.array_equal(controller.logits, before)
    assert stats.quantile == pytest.approx(0.3)
    assert stats.batch_best == pytest.approx(0.3)


def test_only_elite_contributes(rng):
    controller = TabularController(LIBRARY, 16)
    cfg = RegressionConfig(entropy_weight=0.0)
    batch = controller.sample(500, rng)
    scores = np.linspace(0.0, 1.0, 500)
    seen = {}

    def record(batch_, elite, advantages, entropy_weight):
        seen["elite"] = list(elite)
        seen["advantages"] = np.asarray(advantages)

    controller.update = record
    stats = train_step(controller, batch, scores, cfg)
    assert stats.elite_count == 25
    assert sorted(seen["elite"]) == list(range(475, 500))
    assert (seen["advantages"] >= 0).all()
    assert seen["advantages"].max() == pytest.approx(1.0 - stats.quantile)


def test_update_raises_elite_probability(rng):
    controller = TabularController(LIBRARY, 8)
    cfg = RegressionConfig(entropy_weight=0.0)
    batch = controller.sample(200, rng)
    target = 0
    scores = np.zeros(200)
    scores[target] = 1.0
    steps = batch.lengths[target]

    def sequence_logp():
        total = 0.0
        for t in range(steps):
            probs = controller.step_distribution(batch.parents[target, t:t + 1], batch.siblings[target, t:t + 1],
                                                 batch.budgets[target, t:t + 1])
            total += np.log(probs[0, batch.actions[target, t]])
        return total

    before = sequence_logp()
    train_step(controller, batch, scores, cfg)
    assert sequence_logp() > before


def test_recurrent_update_changes_parameters(rng):
    controller = RecurrentController(LIBRARY, 8, hidden_size=8, seed=1)
    batch = controller.sample(100, rng)
    before = [p.detach().clone() for p in controller.net.parameters()]
    train_step(controller, batch, np.linspace(0, 1, 100), RegressionConfig(controller="recurrent"))
    after = list(controller.net.parameters())
    assert any(not (a == b).all() for a, b in zip(after, before))


# --- hall of fame ---

def test_hall_of_fame_ranking():
    hof = HallOfFame(size=2)
    hof.consider(parse_infix("x1 + x2"), 0.5, 0)
    hof.consider(parse_infix("x1"), 0.5, 0)
    hof.consider(parse_infix("cos(x1)"), 0.2, 0)
    hof.trim()
    assert [e.infix for e in hof.entries] == ["x1", "(x1 + x2)"]
    assert len(hof) == 2


def test_pareto_front():
    hof = HallOfFame()
    hof.consider(parse_infix("x1"), 0.3, 0)
    hof.consider(parse_infix("cos(x1)"), 0.2, 0)
    hof.consider(parse_infix("x1 + x2"), 0.6, 1)
    hof.consider(parse_infix("(x1 + x2) * x3"), 0.6, 1)
    front = hof.pareto_front()
    assert [(e.complexity, e.fitness) for e in front] == [(1, 0.3), (3, 0.6)]


# --- run_regression ---

def test_run_regression_monotone_curve(cos_x2_dataset):
    hof = run_regression(cos_x2_dataset, RegressionConfig(**FAST, seed=3))
    curve = hof.training_curve()
    assert list(curve.iteration) == list(range(len(curve)))
    assert curve.best_fitness.is_monotonic_increasing
    assert (curve.best_fitness >= curve.batch_best - 1e-15).all()
    assert hof.best.fitness == curve.best_fitness.iloc[-1]


def test_empty_iteration_budget(cos_x2_dataset):
    hof = run_regression(cos_x2_dataset, RegressionConfig(batch_size=50, max_iterations=0))
    assert len(hof.training_curve()) == 1
    assert {e.iteration for e in hof.entries} == {0}


@pytest.mark.parametrize("controller", ["tabular", "recurrent"])
def test_seed_determinism(cos_x2_dataset, controller):
    cfg = RegressionConfig(**FAST, seed=11, controller=controller, hidden_size=8)
    first = run_regression(cos_x2_dataset, cfg)
    second = run_regression(cos_x2_dataset, cfg)
    assert [e.as_dict() for e in first.entries] == [e.as_dict() for e in second.entries]


def test_thread_pool_matches_serial(cos_x2_dataset):
    serial = run_regression(cos_x2_dataset, RegressionConfig(**FAST, seed=2))
    pooled = run_regression(cos_x2_dataset, RegressionConfig(**FAST, seed=2, n_jobs=4))
    assert [e.as_dict() for e in serial.entries] == [e.as_dict() for e in pooled.entries]


def test_stop_fitness_ends_early(cos_x2_dataset):
    hof = run_regression(cos_x2_dataset, RegressionConfig(batch_size=100, max_iterations=50, stop_fitness=0.0))
    assert len(hof.training_curve()) == 1


def test_write_and_load_hall_of_fame(tmp_path, cos_x2_dataset):
    hof = run_regression(cos_x2_dataset, RegressionConfig(**FAST))
    path = write_hall_of_fame(hof, tmp_path)
    data = json.loads(path.read_text())
    top = data["entries"][0]
    assert set(top) == {"infix", "preorder", "fitness", "complexity", "iteration"}
    assert data["config"]["units"] == "ms"
    tree, units = best_expression(path)
    assert tree.symbols == hof.best.expression.symbols
    assert parse_infix(top["infix"]).symbols == tree.symbols
    header = (tmp_path / "training_curve.csv").read_text().splitlines()[0]
    assert header.startswith("iteration,quantile,")


# --- planted-target recovery ---

def agrees_on_fresh_points(found, fresh):
    values, _ = evaluate_batch(found, fresh.X)
    return np.allclose(values, fresh.y, rtol=1e-9, atol=1e-9)


@pytest.mark.slow
@pytest.mark.parametrize("target", ["cos(x2)", "x1 / x3 + x2"])
def test_planted_target_recovery(planted, target):
    recovered = 0
    for seed in range(5):
        data = planted(target, seed=seed)
        hof = run_regression(data, RegressionConfig(seed=seed, max_iterations=200, time_budget_s=600))
        best = hof.best
        if best.fitness >= 1 - 1e-9 and agrees_on_fresh_points(best.expression, planted(target, seed=seed + 1000)):
            recovered += 1
    assert recovered >= 4
