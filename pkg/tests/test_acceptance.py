"""Acceptance gate: one test per criterion, each reported PASS/FAIL in the run summary."""

import json
import time
from dataclasses import replace

import numpy as np
import pytest

from _gradcheck import TOL, numeric_grad, rel_err
from conftest import TINY_DATA
from fedadv import autodiff as ad
from fedadv.data import generate
from fedadv.fed import FedConfig, TrainConfig, fedavg_aggregate, run_centralized, run_federated
from fedadv.harness import ExperimentConfig, mu_sweep, run_suite
from fedadv.nn import DISCRIMINATOR, FEATURE_EXTRACTOR, ModelSpec, forward_age, forward_features, forward_site, init_params
from fedadv.objective import AlgoConfig, GrlSchedule, grl_lambda, loss_d, loss_prox, loss_y, total_local_loss

SMALL = ModelSpec(input_dim=16, fe_hidden=(8,), feature_dim=6, disc_hidden=(16,), target_offset=24.0, target_scale=9.0)
SMALL_TRAIN = TrainConfig(batch_size=64)


@pytest.fixture(scope="module")
def tiny():
    return generate(TINY_DATA, 0)


def _fd_check(build, arrays, transform=None):
    """Worst relative error of analytic vs central-difference gradients of ``build``."""
    leaves = [ad.tensor(a.copy(), requires_grad=True) for a in arrays]
    ad.backward(build(*leaves))
    worst = 0.0
    for k, (leaf, arr) in enumerate(zip(leaves, arrays)):
        num = numeric_grad(lambda: build(*(ad.constant(a) for a in arrays)).item(), arr)
        if transform is not None:
            num = transform(k, num)
        worst = max(worst, rel_err(leaf.grad, num))
    return worst


@pytest.mark.criterion("1 gradient checks (rel err < 1e-6, < 30 s)")
def test_gradient_check_suite(criterion):
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    u = lambda *shape: rng.uniform(-2, 2, size=shape)  # noqa: E731
    w43, w4 = u(4, 3), u(4)
    lam = 1.7
    cases = {
        "matmul": (lambda a, b: ad.total(ad.mul(ad.matmul(a, b), ad.constant(w43))), [u(4, 5), u(5, 3)]),
        "add_bias": (lambda x, b: ad.total(ad.mul(ad.add_bias(x, b), ad.constant(w43))), [u(4, 3), u(3)]),
        "add": (lambda a, b: ad.sum_sq(ad.add(a, b)), [u(4, 3), u(4, 3)]),
        "sub": (lambda a, b: ad.sum_sq(ad.sub(a, b)), [u(4, 3), u(4, 3)]),
        "mul": (lambda a, b: ad.total(ad.mul(ad.mul(a, b), ad.constant(w43))), [u(4, 3), u(4, 3)]),
        "scale": (lambda a: ad.total(ad.mul(ad.scale(a, -0.3), ad.constant(w43))), [u(4, 3)]),
        "relu": (lambda a: ad.total(ad.mul(ad.relu(a), ad.constant(w43))), [np.where(np.abs(x := u(4, 3)) < 1e-2, 0.5, x)]),
        "tanh": (lambda a: ad.total(ad.mul(ad.tanh(a), ad.constant(w43))), [u(4, 3)]),
        "total": (lambda a: ad.total(a), [u(4, 3)]),
        "mean": (lambda a: ad.mean(ad.mul(a, a)), [u(4, 3)]),
        "sum_sq": (lambda a: ad.sum_sq(a), [u(4, 3)]),
        "log_softmax": (lambda a: ad.total(ad.mul(ad.log_softmax(a), ad.constant(w43))), [u(4, 3)]),
        "loss_y": (lambda p: loss_y(p, w4), [u(4, 1)]),
        "loss_d": (lambda z: loss_d(z, [0, 2, 1, 2], 0.06), [u(4, 3)]),
    }
    errors = {name: _fd_check(build, arrays) for name, (build, arrays) in cases.items()}
    # reversal: the propagated gradient is -lam times that of the identity map
    errors["grad_reverse"] = _fd_check(
        lambda a: ad.total(ad.mul(ad.grad_reverse(a, lam), ad.constant(w43))), [u(4, 3)], lambda k, g: -lam * g
    )

    spec = ModelSpec(input_dim=5, fe_hidden=(4,), feature_dim=3, reg_hidden=(2,), disc_hidden=(6,), n_sites=4)
    for trial in range(3):
        p = init_params(spec, trial)
        ref = p.with_arrays({n: a + rng.normal(scale=0.1, size=a.shape) for n, a in p.arrays().items()}, requires_grad=False)
        x, y, labels = u(4, 5), u(4), rng.integers(0, 4, size=4)

        def parts(params):
            f = forward_features(params, x)
            return loss_y(forward_age(params, f), y), loss_d(forward_site(params, f, lam), labels), loss_prox(params, ref, 3.0, "all_parameters")

        p.zero_grad()
        ad.backward(total_local_loss(*parts(p))[0])
        arrays = p.arrays()
        frozen = lambda: parts(p.with_arrays(arrays, requires_grad=False))  # noqa: E731
        for name in p.names():
            task = numeric_grad(lambda: frozen()[0].item() + frozen()[2].item(), arrays[name])
            site = numeric_grad(lambda: frozen()[1].item(), arrays[name])
            expected = task - lam * site if p.group_of(name) == FEATURE_EXTRACTOR else task + site
            errors[f"composite[{trial}].{name}"] = rel_err(p[name].grad, expected)

    elapsed = time.perf_counter() - start
    worst = max(errors, key=errors.get)
    criterion.detail = f"worst {worst} {errors[worst]:.2e}, {elapsed:.1f} s"
    assert errors[worst] < TOL
    assert elapsed < 30


@pytest.mark.criterion("2 proximal term analytics")
def test_prox_analytics(criterion, tiny):
    rng = np.random.default_rng(0)
    local = init_params(SMALL, 0)
    glob = local.with_arrays({n: rng.normal(size=a.shape) for n, a in local.arrays().items()}, requires_grad=False)
    worst = 0.0
    for scope in ("discriminator_only", "all_parameters"):
        local.zero_grad()
        ad.backward(loss_prox(local, glob, 40.0, scope))
        for name, t in local.items():
            in_scope = scope == "all_parameters" or local.group_of(name) == DISCRIMINATOR
            expected = 40.0 * (t.data - glob[name].data) if in_scope else 0.0
            worst = max(worst, float(np.max(np.abs(t.grad - expected))))
            if not in_scope:
                assert not t.grad.any()
    assert worst <= 1e-12

    logged = []
    run_federated(
        FedConfig(rounds=2, local_epochs=1), AlgoConfig("feddapl", mu=40.0), tiny, 0, SMALL, SMALL_TRAIN,
        step_hook=lambda c, r, p, g, b: logged.append(b),
    )
    run_centralized(AlgoConfig("dann", mu=0), tiny, 0, SMALL, replace(SMALL_TRAIN, centralized_epochs=12), step_hook=lambda c, r, p, g, b: logged.append(b))
    assert all(b.l_total == (b.l_y + b.l_d) + b.l_prox for b in logged)
    assert all(min(b.l_y, b.l_d, b.l_prox) >= 0 for b in logged)
    assert any(b.l_prox > 0 for b in logged)
    criterion.detail = f"max grad error {worst:.1e}, {len(logged)} logged steps additive"


@pytest.mark.criterion("3 equivalences (mu=0 vs naive, K=1 FedAvg vs ERM)")
def test_equivalences(criterion, tiny):
    fed = FedConfig(rounds=3, local_epochs=2)
    a = run_federated(fed, AlgoConfig("feddapl", mu=0.0), tiny, 5, SMALL, SMALL_TRAIN)
    b = run_federated(fed, AlgoConfig("naive_feddann", mu=0.0), tiny, 5, SMALL, SMALL_TRAIN)
    assert a.model.params.equal(b.model.params)
    assert [r.to_dict() for r in a.rounds] == [r.to_dict() for r in b.rounds]

    steps = {"fed": [], "central": []}
    train = replace(SMALL_TRAIN, centralized_epochs=15, validate_every=5)
    f = run_federated(
        FedConfig(clients=1, rounds=3, local_epochs=5, reset_optimizer=False), AlgoConfig("fedavg", mu=0), tiny, 5, SMALL, train,
        step_hook=lambda c, r, p, g, bd: steps["fed"].append(p.flatten().copy()),
    )
    c = run_centralized(AlgoConfig("erm", mu=0), tiny, 5, SMALL, train, step_hook=lambda c, r, p, g, bd: steps["central"].append(p.flatten().copy()))
    assert len(steps["fed"]) == len(steps["central"]) > 0
    assert all(np.array_equal(x, y) for x, y in zip(steps["fed"], steps["central"]))
    assert f.model.params.equal(c.params)
    criterion.detail = f"{len(steps['fed'])} identical steps"


@pytest.mark.criterion("4 GRL schedule")
def test_grl_schedule(criterion):
    s = GrlSchedule()
    assert all(grl_lambda(s, e) == 0.0 for e in range(10))
    end = grl_lambda(s, 75)
    assert abs(end - 8.4845) <= 1e-3
    values = [grl_lambda(s, e) for e in range(0, 200)]
    assert all(b >= a for a, b in zip(values, values[1:]))
    assert max(values) < s.scale
    criterion.detail = f"lambda(p=1) = {end:.6f}"


@pytest.mark.criterion("5 aggregation algebra")
def test_aggregation_algebra(criterion):
    spec = ModelSpec(input_dim=1, fe_hidden=(), feature_dim=1, disc_hidden=(), n_sites=2)
    base = init_params(spec, 0)
    zero, four = (base.with_arrays({n: np.full_like(a, v) for n, a in base.arrays().items()}) for v in (0.0, 4.0))
    assert set(fedavg_aggregate([zero, four], [3, 1]).flatten()) == {1.0}
    assert set(fedavg_aggregate([zero, four], [1, 1]).flatten()) == {2.0}

    ps = [init_params(SMALL, s) for s in range(5)]
    weights = [700.0, 120.0, 300.0, 250.0, 217.0]
    ref = fedavg_aggregate(ps, weights, list(range(5))).flatten()
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(20):
        perm = rng.permutation(5)
        out = fedavg_aggregate([ps[i] for i in perm], [weights[i] for i in perm]).flatten()
        worst = max(worst, float(np.max(np.abs(out - ref))))
    assert worst <= 1e-12
    assert fedavg_aggregate([ps[0]] * 4, weights[:4]).equal(ps[0])
    criterion.detail = f"max permutation deviation {worst:.1e}"


def _pinned_suites():
    cfg = ExperimentConfig()
    seeds = list(range(10))
    runs = {
        "erm": cfg.with_algo("erm"),
        "dann": cfg.with_algo("dann"),
        "fedavg": cfg.with_algo("fedavg"),
        "naive_feddann": cfg.with_algo("naive_feddann"),
        "feddapl": cfg.with_algo("feddapl", mu=40.0, optimizer="adam"),
    }
    return {k: run_suite(c, seeds) for k, c in runs.items()}


@pytest.mark.criterion("6 ordering on the pinned synthetic config")
def test_ordering_reproduction(criterion):
    cfg = ExperimentConfig()
    assert (cfg.data.n_train_sites, cfg.data.n_ood_sites) == (15, 19)
    assert (cfg.fed.clients, cfg.fed.rounds, cfg.fed.local_epochs) == (5, 15, 5)
    start = time.perf_counter()
    reps = _pinned_suites()
    elapsed = time.perf_counter() - start
    m = {k: r.mae_mean for k, r in reps.items()}
    wins = sum(a < b for a, b in zip(reps["feddapl"].seed_maes, reps["fedavg"].seed_maes))
    criterion.detail = (
        f"ERM {m['erm']:.3f}, DANN {m['dann']:.3f}, FedAvg {m['fedavg']:.3f}, "
        f"NaiveFedDANN {m['naive_feddann']:.3f}, FedDAPL {m['feddapl']:.3f}, wins {wins}/10, {elapsed:.0f} s"
    )
    print(criterion.detail)
    assert all(not r.diverged for r in reps.values())
    assert m["dann"] < m["erm"], "(a) DANN < ERM"
    assert m["feddapl"] < m["fedavg"] and m["feddapl"] < m["naive_feddann"], "(b) FedDAPL below FedAvg and Naive FedDANN"
    assert wins >= 8, "(c) paired wins"
    assert elapsed < 600


@pytest.mark.criterion("7 mu-sweep structure and determinism")
def test_mu_sweep_structure(criterion, tiny_cfg, tmp_path):
    mus = [0, 10, 20, 40, 100]
    table, _ = mu_sweep(tiny_cfg, mus=mus, seeds=[0, 1], rows=(("feddapl", "adam"), ("feddapl", "sgd")), out_dir=tmp_path / "a")
    mu_sweep(tiny_cfg, mus=mus, seeds=[0, 1], rows=(("feddapl", "adam"), ("feddapl", "sgd")), out_dir=tmp_path / "b")
    for opt, row in zip(("adam", "sgd"), table):
        naive = run_suite(tiny_cfg.with_algo("naive_feddann", optimizer=opt), [0, 1])
        assert row[0.0] == naive.mae_mean
    lines = (tmp_path / "a" / "table3.csv").read_text().splitlines()
    assert lines[0] == "method,mu=0,mu=10,mu=20,mu=40,mu=100"
    assert [l.split(",")[0] for l in lines[1:]] == ["FedDAPL (Adam)", "FedDAPL (SGD)"]
    assert (tmp_path / "a" / "table3.csv").read_bytes() == (tmp_path / "b" / "table3.csv").read_bytes()
    criterion.detail = "mu=0 column equals naive rows; CSV byte-identical on rerun"


@pytest.mark.criterion("8 privacy boundary")
def test_privacy_boundary(criterion, tiny):
    pooled = tiny.pooled_train()
    raw = set(pooled.features.ravel().tolist()) | set(pooled.y.tolist())
    messages = 0
    for algo in (AlgoConfig("fedavg", mu=0), AlgoConfig("naive_feddann", mu=0), AlgoConfig("fedprox", mu=20), AlgoConfig("feddapl", mu=40)):
        blobs = []
        run_federated(FedConfig(rounds=2, local_epochs=1), algo, tiny, 0, SMALL, SMALL_TRAIN, transport=blobs.append)
        for blob in blobs:
            msg = json.loads(blob)
            assert set(msg) == {"format", "client_id", "round", "n_samples", "loss_means", "params"}
            assert set(msg["params"]) == {"format", "entries"}
            assert all(set(e) == {"name", "group", "shape", "values"} for e in msg["params"]["entries"])
            numbers = list(msg["loss_means"].values()) + [msg["client_id"], msg["round"], msg["n_samples"]]
            for t in msg["params"]["entries"]:
                numbers.extend(np.asarray(t["values"], dtype=float).ravel().tolist())
            assert not raw & set(float(v) for v in numbers)
            messages += 1
    criterion.detail = f"{messages} client messages inspected"
