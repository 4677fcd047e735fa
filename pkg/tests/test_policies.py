import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flexquant.envelope import envelope_uaf_opt
from flexquant.errors import DegenerateInput, MissingHour, SchemaError, ShapeMismatch, SolverFailure
from flexquant.instances import InstanceConfig, make_instance
from flexquant.policies import (
    AffinePolicy,
    PolicyLibrary,
    average_policy,
    kmeans,
    policy_distance,
    select_policy,
    train_average_policy,
    train_cluster_policies,
    weather_features,
)

SHAPE = (6, 3, 5)


def rand_policy(seed, direction="up"):
    return AffinePolicy(np.random.default_rng(seed).normal(size=SHAPE), 0, direction)


# --- distances and averaging -----------------------------------------------------

def test_distance_identical():
    p = rand_policy(0)
    assert policy_distance(p, p) == (0.0, 0.0)


def test_distance_constant_offset():
    p = rand_policy(1)
    q = AffinePolicy(p.gains + 0.3)
    mean, mx = policy_distance(p, q)
    assert mean == pytest.approx(0.3 * np.sqrt(15)) and mx == pytest.approx(0.3 * np.sqrt(15))


def test_distance_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        policy_distance(rand_policy(0), AffinePolicy(np.zeros((5, 3, 5))))


@settings(max_examples=30, deadline=None)
@given(a=st.integers(0, 10**6), b=st.integers(0, 10**6), c=st.integers(0, 10**6))
def test_distance_triangle(a, b, c):
    pa, pb, pc = rand_policy(a), rand_policy(b), rand_policy(c)
    for i in (0, 1):
        assert policy_distance(pa, pc)[i] <= policy_distance(pa, pb)[i] + policy_distance(pb, pc)[i] + 1e-12


def test_average_of_opposites_is_zero():
    p = rand_policy(2)
    avg = average_policy([p, AffinePolicy(-p.gains)])
    assert avg.gains.shape == SHAPE and not avg.gains.any()


def test_train_average_single_and_repeated():
    p = rand_policy(3)
    solve = lambda inp, d: p
    assert policy_distance(train_average_policy(["a"], "up", solve=solve), p) == (0.0, 0.0)
    rep = train_average_policy(["a"] * 4, "up", solve=solve)
    np.testing.assert_allclose(rep.gains, p.gains, atol=1e-15)


def test_train_average_is_entrywise_mean():
    pols = {i: rand_policy(10 + i) for i in range(5)}
    avg = train_average_policy(range(5), "down", hour=3, solve=lambda i, d: pols[i])
    np.testing.assert_allclose(avg.gains, np.mean([p.gains for p in pols.values()], axis=0))
    assert avg.anchor_hour == 3 and avg.direction == "down"


def test_train_average_names_failing_instance():
    def solve(i, d):
        if i == 2:
            raise SolverFailure("boom")
        return rand_policy(i)
    with pytest.raises(SolverFailure, match="training instance 2"):
        train_average_policy(range(4), "up", solve=solve)


def test_policy_validation():
    with pytest.raises(ValueError):
        AffinePolicy(np.full(SHAPE, np.nan))
    with pytest.raises(ValueError):
        AffinePolicy(np.zeros(SHAPE), direction="left")


# --- k-means -------------------------------------------------------------------

def test_kmeans_single_cluster_is_mean():
    X = np.random.default_rng(0).normal(size=(30, 4))
    res = kmeans(X, 1)
    np.testing.assert_allclose(res.centers[0], X.mean(axis=0))


def test_kmeans_separates_blobs():
    rng = np.random.default_rng(1)
    X = np.vstack([rng.normal(0, 0.2, (25, 2)), rng.normal(10, 0.2, (25, 2))])
    res = kmeans(X, 2, seed=3)
    assert len(set(res.labels[:25])) == 1 and len(set(res.labels[25:])) == 1
    assert res.labels[0] != res.labels[-1]


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10**6), k=st.integers(1, 6))
def test_kmeans_objective_monotone_and_deterministic(seed, k):
    X = np.random.default_rng(seed).normal(size=(40, 3))
    res = kmeans(X, k, seed)
    assert np.all(np.diff(res.history) <= 1e-9)
    again = kmeans(X, k, seed)
    np.testing.assert_array_equal(res.labels, again.labels)
    np.testing.assert_array_equal(res.centers, again.centers)


def test_kmeans_degenerate():
    with pytest.raises(DegenerateInput):
        kmeans(np.ones((5, 2)), 2)
    with pytest.raises(ValueError):
        kmeans(np.zeros((3, 2)), 4)


def test_weather_features_layout():
    f = np.array([[1.0, 0.0], [3.0, 0.4]])
    np.testing.assert_allclose(weather_features(f), [2.0, 0.2, 1.0, 0.2, 1.0])


# --- library and selection ---------------------------------------------------------

def _two_cluster_library():
    lib = PolicyLibrary("cluster")
    lib.add(0, "up", rand_policy(1), [0.0, 0.0])
    lib.add(0, "up", rand_policy(2), [2.0, 0.0])
    return lib


def test_select_single_entry():
    lib = PolicyLibrary()
    p = rand_policy(5)
    lib.add(0, "up", p)
    assert select_policy(lib, 0, [1.0, 2.0]) is p
    assert select_policy(lib, 24) is p


def test_select_nearest_and_tie():
    lib = _two_cluster_library()
    first, second = lib.entries[(0, "up")][0][1], lib.entries[(0, "up")][1][1]
    assert select_policy(lib, 0, [2.0, 0.0]) is second
    assert select_policy(lib, 0, [0.0, 0.0]) is first
    assert select_policy(lib, 0, [1.0, 0.0]) is first
    assert select_policy(lib, 0, [1.0, 0.0]) is select_policy(lib, 0, [1.0, 0.0])


def test_select_missing_hour():
    with pytest.raises(MissingHour):
        select_policy(_two_cluster_library(), 5)
    with pytest.raises(MissingHour):
        select_policy(_two_cluster_library(), 0, direction="down")


def test_library_round_trip(tmp_path):
    lib = _two_cluster_library()
    lib.metadata = {"samples": 2, "seed": 7}
    lib.save(tmp_path / "lib.json")
    back = PolicyLibrary.load(tmp_path / "lib.json")
    assert back.mode == "cluster" and back.metadata == lib.metadata
    for (c1, p1), (c2, p2) in zip(lib.entries[(0, "up")], back.entries[(0, "up")]):
        np.testing.assert_array_equal(c1, c2)
        np.testing.assert_array_equal(p1.gains, p2.gains)
    doc = lib.to_dict()
    doc["version"] = 99
    with pytest.raises(SchemaError):
        PolicyLibrary.from_dict(doc)


def test_cluster_training_with_stub_solver():
    rng = np.random.default_rng(0)
    F = np.vstack([rng.normal(0, 0.1, (4, 5)), rng.normal(5, 0.1, (4, 5))])
    pols = {i: rand_policy(100 + i) for i in range(8)}
    solve = lambda i, d: pols[i]
    one = train_cluster_policies(range(8), F, 1, solve=solve)
    Z = one.scaler.transform(F)
    central = int(np.argmin(((Z - Z.mean(axis=0)) ** 2).sum(axis=1)))
    assert select_policy(one, 0, F[0]) is pols[central]
    every = train_cluster_policies(range(8), F, 8, seed=1, solve=solve)
    for i in range(8):
        assert select_policy(every, 0, F[i]) is pols[i]
        assert select_policy(every, 0, F[i], "down") is pols[i]


# --- training trends on real optima (short horizon keeps the SOCPs cheap) ----------

@pytest.fixture(scope="module")
def short_optima():
    cfg = InstanceConfig(N=6)
    base = make_instance(0, cfg)
    days = [make_instance(s, cfg, art=base.art) for s in range(100, 134)]
    opt = [envelope_uaf_opt(d)[1] for d in days]
    return days, opt


def test_single_instance_average_is_its_optimum(short_optima):
    days, opt = short_optima
    avg = train_average_policy(days[:1], "up")
    mean, mx = policy_distance(avg, opt[0])
    assert mx <= 1e-6 * max(1.0, np.abs(opt[0].gains).max())


def test_more_training_samples_do_not_hurt(short_optima):
    days, opt = short_optima
    held = opt[20:]
    by_index = dict(enumerate(opt))
    solve = lambda i, d: by_index[i]
    worst = []
    for n in (10, 20):
        avg = train_average_policy(range(n), "up", solve=solve)
        worst.append(np.mean([policy_distance(avg, h)[1] for h in held]))
    assert worst[1] <= worst[0] * 1.05


def test_cluster_count_changes_distance_little(short_optima):
    days, opt = short_optima
    by_index = dict(enumerate(opt))
    feats = np.array([weather_features(d.forecast) for d in days])
    solve = lambda i, d: by_index[i]
    out = []
    for k in (1, 2, 3, 4, 5):
        lib = train_cluster_policies(range(20), feats[:20], k, seed=0, solve=solve)
        out.append(np.mean([policy_distance(select_policy(lib, 0, feats[i]), opt[i])[0] for i in range(20, 34)]))
    # a single representative day cannot cover distinct optimum regimes; beyond that the count matters little
    assert max(out[1:]) <= 1.5 * min(out[1:])
    assert max(out[1:]) <= out[0]
