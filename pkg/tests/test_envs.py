import numpy as np
import pytest
from scipy import stats

from dicode.envs import (
    MAX_REJECTION_RETRIES,
    NavScenario,
    ScenarioError,
    WarehouseCoordScenario,
    WarehouseScenario,
    WindScenario,
    design_hash,
    design_to_record,
    make_scenario,
    record_to_design,
    shaped_reward,
    wake_deficits,
    wake_power,
)
from dicode.envs.base import ScenarioSpec, ValidationReport
from dicode.envs.warehouse import LEFT, NOOP, TOGGLE, UP
from toys import easy_warehouse


# -- uniform generators ------------------------------------------------------------


def test_warehouse_uniform_marginals_chi_square():
    wh = WarehouseScenario()
    rng = np.random.default_rng(0)
    occ = np.zeros((wh.H, wh.W))
    for _ in range(10_000):
        occ += wh.uniform_generate(rng).sum(0)
    free = ~wh.forbidden
    assert occ[~free].sum() == 0
    counts = occ[free]
    p = stats.chisquare(counts).pvalue
    assert p > 0.01


@pytest.mark.parametrize("sid", ["nav", "warehouse", "warehouse-coord", "wind"])
def test_uniform_generate_always_valid(sid):
    sc = make_scenario(sid)
    rng = np.random.default_rng(1)
    for _ in range(200):
        assert sc.validate(sc.uniform_generate(rng))


def test_nav_obstacles_stay_in_local_boundary():
    nav = NavScenario()
    th = nav.uniform_batch(np.random.default_rng(0), 500)
    assert np.all(th >= nav.lo) and np.all(th <= nav.hi)
    assert np.all(np.abs(th - nav.anchors) <= nav.box_half + 1e-12)


def test_rejection_cap_raises():
    class Never(ScenarioSpec):
        scenario_id = "never"

        def _draw(self, rng):
            return np.zeros(1)

        def validate(self, theta):
            return ValidationReport(False, ["always invalid"])

    with pytest.raises(ScenarioError, match=str(MAX_REJECTION_RETRIES)):
        Never().uniform_generate(np.random.default_rng(0))


def test_unknown_scenario():
    with pytest.raises(ScenarioError):
        make_scenario("nope")


# -- instantiation ---------------------------------------------------------------------


@pytest.mark.parametrize("sid", ["nav", "warehouse", "warehouse-coord", "wind"])
def test_instantiate_deterministic_and_rejects_invalid(sid):
    sc = make_scenario(sid)
    th = sc.uniform_generate(np.random.default_rng(2))
    a, b = sc.instantiate(th, 7), sc.instantiate(th, 7)
    assert np.array_equal(sc.critic_input(a), sc.critic_input(b))
    with pytest.raises(ScenarioError):
        sc.instantiate(th + 100.0, 0)


def test_warehouse_shelf_embedding():
    wh = WarehouseScenario()
    th = np.zeros(wh.design_shape)
    cells = [(2, 3), (1, 1), (1, 2), (1, 3), (5, 5), (5, 6), (6, 5), (6, 6)]
    for k, (r, c) in enumerate(cells):
        th[k // 4, r, c] = 1
    st = wh.instantiate(th, 0)
    assert st.shelf_color[2, 3] == 0 and st.box[2, 3]
    assert st.shelf_color[6, 6] == 1
    assert st.requested.sum() == wh.n_requests


def test_wind_instantiation_draws_weibull_wind():
    wi = WindScenario()
    th = wi.uniform_generate(np.random.default_rng(0))
    st = wi.instantiate(th, 11)
    rng = np.random.default_rng(11)
    speed = float(np.clip(wi.weibull_scale * rng.weibull(wi.weibull_shape), *wi.speed_range))
    assert st.wind_speed == speed
    assert abs(st.wind_dir) <= wi.dir_sector


# -- stepping ----------------------------------------------------------------------------


def test_warehouse_wall_blocks_move():
    wh, th = easy_warehouse()
    st = wh.instantiate(th, 0)
    st.pos[0] = (0, 1)
    nxt, _, r, _ = wh.step(st, np.array([UP, NOOP]))
    assert tuple(nxt.pos[0]) == (0, 1) and nxt.t == 1
    assert np.all(r == 0)


def test_warehouse_agents_block_each_other():
    wh, th = easy_warehouse()
    st = wh.instantiate(th, 0)
    st.pos[0], st.pos[1] = (3, 3), (3, 2)
    nxt, *_ = wh.step(st, np.array([LEFT, NOOP]))
    assert tuple(nxt.pos[0]) == (3, 3)


def test_warehouse_three_step_delivery_trace():
    wh, th = easy_warehouse()
    s0 = wh.instantiate(th, 0)
    s0.pos[0] = (0, 2)
    s0.carry[0], s0.carry_req[0] = 0, True
    s0.box[0, 2] = False
    s0.requested[0, 2] = False
    states, base, shaped = [s0], [], []
    for a in ([LEFT, NOOP], [LEFT, NOOP], [TOGGLE, NOOP]):
        nxt, _, r, _ = wh.step(states[-1], np.array(a))
        shaped.append(shaped_reward(wh, states[-1], nxt, r))
        base.append(r)
        states.append(nxt)
    assert np.sum(base) == 1.0
    phi0, phiT = wh.potential(s0), wh.potential(states[-1])
    assert phi0[0] == pytest.approx(wh.c_pick - 2 * wh.c_dist)
    assert phiT[0] == pytest.approx(-wh.c_empty)
    assert np.sum(shaped) == pytest.approx(1.0 + phiT.sum() - phi0.sum(), abs=1e-12)
    assert states[-1].deliveries == 1


def test_nav_statics_with_zero_action():
    nav = NavScenario()
    st = nav.instantiate(nav.uniform_generate(np.random.default_rng(0)))
    nxt, obs, r, done = nav.step(st, np.array([0, 0]))
    np.testing.assert_array_equal(nxt.pos, st.pos)
    np.testing.assert_array_equal(r, 0.0)
    assert obs.shape == (2, nav.obs_dim) and nav.critic_input(nxt).shape == (nav.state_dim,)


def test_malformed_actions_rejected():
    nav = NavScenario()
    st = nav.instantiate(nav.uniform_generate(np.random.default_rng(0)))
    for bad in (np.array([0]), np.array([0, 9]), np.array([0.0, 1.0]), np.array([-1, 0])):
        with pytest.raises(ScenarioError):
            nav.step(st, bad)


def test_trajectory_determinism():
    for sid in ("nav", "warehouse", "wind"):
        sc = make_scenario(sid)
        th = sc.uniform_generate(np.random.default_rng(3))
        acts = np.random.default_rng(4).integers(0, sc.n_actions, size=(20, sc.n_agents))
        outs = []
        for _ in range(2):
            st = sc.instantiate(th, 5)
            rs = []
            for a in acts:
                st, _, r, _ = sc.step(st, a)
                rs.append(r)
            outs.append((np.array(rs), sc.critic_input(st)))
        np.testing.assert_array_equal(outs[0][0], outs[1][0])
        np.testing.assert_array_equal(outs[0][1], outs[1][1])


# -- shaping and conservation -----------------------------------------------------------------


def test_shaping_telescopes_and_boxes_are_conserved():
    wh = WarehouseScenario()
    rng = np.random.default_rng(0)
    for ep in range(100):
        th = wh.uniform_generate(rng)
        s0 = st = wh.instantiate(th, ep)
        n_boxes = st.n_boxes()
        total_shaping = np.zeros(wh.n_agents)
        for t in range(wh.horizon):
            a = wh.heuristic_actions(st) if ep % 2 else rng.integers(0, wh.n_actions, wh.n_agents)
            nxt, _, r, _ = wh.step(st, a)
            total_shaping += shaped_reward(wh, st, nxt, r) - r
            st = nxt
            assert st.n_boxes() == n_boxes
        np.testing.assert_allclose(total_shaping, wh.potential(st) - wh.potential(s0), atol=1e-9)


def test_stationary_transition_has_zero_shaping():
    wh, th = easy_warehouse()
    st = wh.instantiate(th, 0)
    st.carry[0], st.carry_req[0] = 1, True
    nxt, _, r, _ = wh.step(st, np.array([NOOP, NOOP]))
    np.testing.assert_array_equal(shaped_reward(wh, st, nxt, r), 0.0)


# -- wake model ----------------------------------------------------------------------------------


def test_single_turbine_full_power():
    assert wake_power(np.zeros((1, 2)), np.zeros(1), 8.0, 0.0) == pytest.approx([1.0], abs=0)


def test_two_turbine_jensen_deficit():
    layout = np.array([[0.0, 0.0], [1.0, 0.0]])
    deficit = (1 - np.sqrt(1 - 0.8)) / (1 + 2 * 0.05 * 1.0) ** 2
    np.testing.assert_allclose(wake_deficits(layout, np.zeros(2), 0.0), [0.0, deficit], atol=1e-15)
    np.testing.assert_allclose(wake_power(layout, np.zeros(2), 8.0, 0.0), [1.0, (1 - deficit) ** 3], atol=1e-15)


def test_wake_rotation_invariance():
    rng = np.random.default_rng(0)
    for _ in range(50):
        layout = rng.uniform(0, 8, (4, 2))
        yaws = rng.uniform(-0.5, 0.5, 4)
        wd = rng.uniform(-np.pi, np.pi)
        phi = rng.uniform(-np.pi, np.pi)
        R = np.array([[np.cos(phi), -np.sin(phi)], [np.sin(phi), np.cos(phi)]])
        a = wake_power(layout, yaws, 9.0, wd).sum()
        b = wake_power(layout @ R.T, yaws, 9.0, wd + phi).sum()
        assert abs(a - b) < 1e-9


def test_yaw_deflects_wake_off_downstream_rotor():
    layout = np.array([[0.0, 0.0], [6.0, 0.7]])
    aligned = wake_power(layout, np.zeros(2), 8.0, 0.0).sum()
    steered = wake_power(layout, np.array([-0.45, 0.0]), 8.0, 0.0).sum()
    assert steered > aligned


def test_wind_validation_names_offending_pair():
    wi = WindScenario()
    th = np.array([[1.0, 1.0], [1.0 + 0.99 * wi.d_min, 1.0], [7.0, 7.0], [1.0, 7.0]])
    rep = wi.validate(th)
    assert not rep and any(v.startswith("pair (0,1)") for v in rep.violations)
    assert wi.validate(wi.operator.finalize(th))


# -- validation messages ----------------------------------------------------------------------------


def test_warehouse_validation_reports():
    wh, th = easy_warehouse()
    assert wh.validate(th)
    bad = th.copy()
    bad[1, 0, 2] = 1
    rep = wh.validate(bad)
    assert any(v.startswith("cell conflict") for v in rep.violations)
    assert any("colour 1 has 5" in v for v in rep.violations)
    goal = th.copy()
    goal[0, 0, 2], goal[0, 0, 0] = 0, 1
    assert any("goal cell" in v for v in wh.validate(goal).violations)
    assert wh.validate(wh.operator.finalize(np.random.default_rng(0).normal(size=wh.design_shape)))


def test_warehouse_coord_roundtrip_and_operators():
    wc = WarehouseCoordScenario()
    rng = np.random.default_rng(0)
    th = wc.uniform_generate(rng)
    np.testing.assert_array_equal(wc.from_mask(wc.to_mask(th)), th)
    np.testing.assert_array_equal(wc.project(th), th)
    clash = th.copy()
    clash[1, :2] = clash[0, :2]
    assert any(v.startswith("cell conflict") for v in wc.validate(clash).violations)
    for _ in range(100):
        x = th + rng.normal(0, 1.0, th.shape)
        assert wc.validate(wc.finalize(x))
        np.testing.assert_allclose(wc.project(wc.project(x)), wc.project(x), atol=1e-9)
    assert wc.same_color_adjacency(th) == WarehouseScenario().same_color_adjacency(wc.to_mask(th))


# -- serialization ------------------------------------------------------------------------------------


def test_design_record_roundtrip():
    th = np.arange(6.0).reshape(3, 2)
    line = design_to_record(th, "nav", iteration=4)
    back, sid, meta = record_to_design(line)
    np.testing.assert_array_equal(back, th)
    assert sid == "nav" and meta == {"iteration": 4}
    assert design_hash(th) == design_hash(back) != design_hash(th + 1)
