import itertools
import json
import subprocess
import sys
from dataclasses import replace

import numpy as np
import pytest

from reconplan.bone import ContactParams, StimulusParams, hu_to_density
from reconplan.design import DesignVector, FeasibleRegion
from reconplan.evaluator import (
    BOLUS_BOOST,
    CLIP_FRACTION,
    HETEROGENEITY,
    EvaluationResult,
    EvaluatorError,
    ExternalEvaluator,
    InfeasibleDesignError,
    SyntheticEvaluator,
    SyntheticModelConfig,
    assemble_result,
    element_coefficient,
    element_region,
    phi_from_json,
    phi_to_json,
    result_from_json,
    result_to_json,
    synthetic_element_penetration,
    synthetic_element_stimulus,
)
from reconplan.objective import f_opt

REGION = FeasibleRegion(alpha_r=25, alpha_p=25, beta_r=20, beta_p=20, z=3.5)
PHI_STAR = DesignVector(10.0, -6.0, 8.0, -4.0, 1.2)
CONFIG = SyntheticModelConfig(phi_star=PHI_STAR)

REGION_RB = FeasibleRegion(
    alpha_r=25, alpha_p=25, beta_r=15, beta_p=15, z=5.0, r=7.0, segment_count=2
)
PHI_STAR_RB = DesignVector(10.0, -6.0, 6.0, -4.0, 1.5, l_rdp=2.0)
CONFIG_RB = SyntheticModelConfig(phi_star=PHI_STAR_RB)


def evaluator():
    return SyntheticEvaluator(REGION, CONFIG)


class TestEvaluateContract:
    def test_deterministic(self):
        phi = DesignVector(3.0, -2.0, 1.0, 0.5, 0.8)
        r1 = evaluator().evaluate(phi)
        r2 = evaluator().evaluate(phi)
        for k in r1.apposition:
            np.testing.assert_array_equal(r1.apposition[k], r2.apposition[k])
        for k in r1.sf_worst:
            np.testing.assert_array_equal(r1.sf_worst[k], r2.sf_worst[k])

    def test_traces_have_62_steps_and_valid_range(self):
        r = evaluator().evaluate(REGION.baseline())
        assert r.n == 62
        for arr in r.apposition.values():
            assert np.all(arr >= 0.0) and np.all(arr <= 1.0)

    def test_infeasible_rejected(self):
        with pytest.raises(InfeasibleDesignError):
            evaluator().evaluate(DesignVector(26.0, 0, 0, 0, 0))

    def test_arity_mismatch_rejected(self):
        with pytest.raises(EvaluatorError):
            evaluator().evaluate(DesignVector(0, 0, 0, 0, 0, l_rdp=1.0))

    def test_interfaces_present(self):
        assert set(evaluator().evaluate(REGION.baseline()).apposition) == {"left", "right"}
        ev_rb = SyntheticEvaluator(REGION_RB, CONFIG_RB)
        assert set(ev_rb.evaluate(REGION_RB.baseline()).apposition) == {
            "left",
            "right",
            "middle",
        }

    def test_planted_optimum_beats_grid(self):
        # cheap model for the 6-D exhaustive sweep (5 points per dimension)
        cfg = replace(CONFIG_RB, elements_per_interface=40, n_steps=21)
        ev = SyntheticEvaluator(REGION_RB, cfg)
        star_val = f_opt(ev.evaluate(PHI_STAR_RB).averages())
        grids = [np.linspace(-h, h, 5) for h in REGION_RB.half_widths()]
        best = max(
            f_opt(ev.evaluate(DesignVector.from_array(np.array(combo))).averages())
            for combo in itertools.product(*grids)
        )
        assert star_val >= best

    def test_unimodal_along_each_axis(self):
        ev = evaluator()
        star = PHI_STAR.to_array()
        for axis in range(5):
            xs = np.linspace(-REGION.half_widths()[axis], REGION.half_widths()[axis], 41)
            vals = []
            for x in xs:
                arr = star.copy()
                arr[axis] = x
                vals.append(f_opt(ev.evaluate(DesignVector.from_array(arr)).averages()))
            vals = np.array(vals)
            peak = int(np.argmax(vals))
            assert np.all(np.diff(vals[: peak + 1]) >= -1e-12)
            assert np.all(np.diff(vals[peak:]) <= 1e-12)


class TestSyntheticClosedForm:
    def test_penetration_peak_no_bolus(self):
        # element with u_e = 0 is synthetic; evaluate the form at misalignment 0,
        # where the heterogeneity factor is irrelevant
        d = synthetic_element_penetration(CONFIG, PHI_STAR, e=0, t_norm=0.5)
        assert d == pytest.approx(CONFIG.peak_gap_mm, rel=1e-12)

    def test_penetration_zero_at_cycle_start(self):
        assert synthetic_element_penetration(CONFIG, PHI_STAR, e=3, t_norm=0.0) == 0.0

    def test_misalignment_beyond_gap_kills_contact_outside_bolus(self):
        # left-plane roll far enough that scale * |delta| > peak gap
        delta_needed = CONFIG.peak_gap_mm / CONFIG.misalignment_scale[0] + 1.0
        phi = replace_component(PHI_STAR, 0, PHI_STAR.theta_lr - delta_needed)
        t_a, t_b = CONFIG.bolus_window
        for t in np.linspace(0, 1, 41):
            if t_a <= t <= t_b:
                continue
            assert synthetic_element_penetration(CONFIG, phi, e=0, t_norm=float(t)) == 0.0

    def test_penetration_clipped_below_thickness(self):
        t_mid = 0.5 * sum(CONFIG.bolus_window)
        d = synthetic_element_penetration(CONFIG, PHI_STAR, e=0, t_norm=t_mid)
        assert d <= CLIP_FRACTION * CONFIG.contact.thickness_mm

    def test_stimulus_zero_without_penetration(self):
        s, maxp, _ = synthetic_element_stimulus(CONFIG, PHI_STAR, e=0, t_norm=0.0)
        assert s == 0.0 and maxp == 0.0

    def test_stimulus_matches_hand_composition(self):
        # build a config whose peak penetration is exactly 0.1 mm on a
        # cancellous element, away from the bolus window
        e = next(k for k in range(50) if element_region(k) == "cancellous")
        cfg = replace(CONFIG, peak_gap_mm=0.1)
        s, maxp, region = synthetic_element_stimulus(cfg, PHI_STAR, e=e, t_norm=0.5)
        assert region == "cancellous"
        p_kpa = 27.9925
        assert maxp == pytest.approx(p_kpa / 1000.0, abs=1e-6)
        sed_mj_mm3 = (p_kpa / 1000.0) ** 2 / (2.0 * 1.1e3)
        expected = cfg.stimulus_gain * 1000.0 * sed_mj_mm3 / hu_to_density(cfg.cancellous_hu)
        assert s == pytest.approx(expected, rel=1e-4)

    def test_cortical_cancellous_ratio(self):
        e_cort = next(k for k in range(50) if element_region(k) == "cortical")
        e_canc = next(k for k in range(50) if element_region(k) == "cancellous")
        cfg = replace(CONFIG, peak_gap_mm=0.1)
        # equal penetration requires equal u_e; compare via the documented form
        # by evaluating both regions at misalignment zero (u_e cancels there)
        s_cort, p_cort, _ = synthetic_element_stimulus(cfg, PHI_STAR, e=e_cort, t_norm=0.5)
        s_canc, p_canc, _ = synthetic_element_stimulus(cfg, PHI_STAR, e=e_canc, t_norm=0.5)
        assert p_cort == pytest.approx(p_canc, rel=1e-12)
        expected_ratio = (1.1 / 13.7) * (
            hu_to_density(cfg.cancellous_hu) / hu_to_density(cfg.cortical_hu)
        )
        assert s_cort / s_canc == pytest.approx(expected_ratio, rel=1e-12)

    def test_element_hash_documented_range(self):
        us = [element_coefficient(e) for e in range(1000)]
        assert all(0.0 <= u < 1.0 for u in us)
        assert len(set(us)) == 1000
        regions = {element_region(e) for e in range(100)}
        assert regions == {"cortical", "cancellous"}


def replace_component(phi: DesignVector, index: int, value: float) -> DesignVector:
    arr = phi.to_array()
    arr[index] = value
    return DesignVector.from_array(arr)


class TestAssemble:
    def test_counting(self):
        thr = StimulusParams().threshold
        below = np.full((4, 3), 0.0)
        above = np.full((4, 3), thr * 2)
        half = np.vstack([above[:2], below[:2]])
        pressures = {"left": np.full((4, 3), 0.01), "right": np.full((4, 3), 0.01)}
        mask = np.array([True, False, True, False])
        r0 = assemble_result({"left": below, "right": below}, pressures, mask)
        r1 = assemble_result({"left": above, "right": above}, pressures, mask)
        rh = assemble_result({"left": half, "right": half}, pressures, mask)
        assert np.all(r0.apposition["left"] == 0.0)
        assert np.all(r1.apposition["left"] == 1.0)
        assert np.all(rh.apposition["left"] == 0.5)

    def test_exact_threshold_does_not_count(self):
        thr = StimulusParams().threshold
        exact = np.full((2, 2), thr)
        pressures = {"left": np.zeros((2, 2)), "right": np.zeros((2, 2))}
        r = assemble_result({"left": exact, "right": exact}, pressures, np.array([True, False]))
        assert np.all(r.apposition["left"] == 0.0)
        assert np.all(np.isinf(r.sf_worst["left"]))

    def test_empty_interface_rejected(self):
        pressures = {"left": np.zeros((1, 2)), "right": np.zeros((1, 2))}
        with pytest.raises(EvaluatorError):
            assemble_result({"left": np.zeros((0, 2)), "right": np.zeros((1, 2))}, pressures, np.array([True]))

    def test_sf_uses_side_maximum_per_region(self):
        p_left = np.array([[0.5, 1.0], [10.0, 20.0]])  # MPa
        pressures = {"left": p_left, "right": np.zeros((2, 2))}
        stim = {"left": np.zeros((2, 2)), "right": np.zeros((2, 2))}
        mask = np.array([True, False])  # element 0 cortical, 1 cancellous
        r = assemble_result(stim, pressures, mask)
        np.testing.assert_allclose(r.sf_worst["left"], [min(100 / 0.5, 5 / 10), min(100 / 1, 5 / 20)])
        assert np.all(np.isinf(r.sf_worst["right"]))


class TestSymmetryAndMonotonicity:
    def test_left_right_swap(self):
        scale = list(CONFIG.misalignment_scale)
        swapped_scale = [scale[2], scale[3], scale[0], scale[1], scale[4], scale[5]]
        star_m = DesignVector(-PHI_STAR.theta_rr, -PHI_STAR.theta_rp,
                              -PHI_STAR.theta_lr, -PHI_STAR.theta_lp, PHI_STAR.l_z)
        cfg_m = replace(CONFIG, phi_star=star_m, misalignment_scale=tuple(swapped_scale))
        ev = SyntheticEvaluator(REGION, CONFIG)
        region_m = FeasibleRegion(alpha_r=25, alpha_p=25, beta_r=25, beta_p=25, z=3.5)
        ev_m = SyntheticEvaluator(region_m, cfg_m)
        phi = DesignVector(4.0, -1.0, 2.0, 3.0, 0.5)
        phi_m = DesignVector(-phi.theta_rr, -phi.theta_rp, -phi.theta_lr, -phi.theta_lp, phi.l_z)
        r = ev.evaluate(phi)
        r_m = ev_m.evaluate(phi_m)
        np.testing.assert_array_equal(r.apposition["left"], r_m.apposition["right"])
        np.testing.assert_array_equal(r.apposition["right"], r_m.apposition["left"])

    def test_sf_decreases_toward_optimum(self):
        ev = evaluator()
        star = PHI_STAR.to_array()
        offsets = [0.0, 5.0, 10.0]
        mins = []
        for off in offsets:
            arr = star.copy()
            arr[0] = star[0] - off
            sf = ev.evaluate(DesignVector.from_array(arr)).sf_worst["left"]
            mins.append(sf.min())
        assert mins[0] <= mins[1] <= mins[2]


class TestJsonProtocol:
    def test_result_round_trip_with_inf(self):
        r = EvaluationResult(
            {"left": [0.1, 0.2], "right": [0.3, 0.4]},
            {"left": [1.5, np.inf], "right": [np.inf, 2.0]},
        )
        back = result_from_json(result_to_json(r))
        np.testing.assert_array_equal(back.sf_worst["left"], [1.5, np.inf])
        np.testing.assert_array_equal(back.apposition["right"], [0.3, 0.4])

    def test_phi_round_trip(self):
        phi = DesignVector(1.0, 2.0, 3.0, 4.0, 5.0, l_rdp=-1.5)
        assert phi_from_json(phi_to_json(phi)) == phi
        phi5 = DesignVector(1.0, 2.0, 3.0, 4.0, 5.0)
        assert phi_from_json(phi_to_json(phi5)) == phi5

    def test_malformed_response(self):
        with pytest.raises(EvaluatorError):
            result_from_json("not json")
        with pytest.raises(EvaluatorError):
            result_from_json(json.dumps({"apposition": {}}))


EXTERNAL_SCRIPT = """
import json, sys
request = json.loads(sys.stdin.read())
phi = request["phi"]
n = 4
apposition = {"left": [abs(phi["theta_lr"]) / 100.0] * n, "right": [0.25] * n}
sf = {"left": ["inf"] * n, "right": [2.0] * n}
print(json.dumps({"apposition": apposition, "sf_worst": sf}))
"""


class TestExternalEvaluator:
    def test_subprocess_round_trip(self, tmp_path):
        script = tmp_path / "eval.py"
        script.write_text(EXTERNAL_SCRIPT)
        ev = ExternalEvaluator(REGION, [sys.executable, str(script)])
        r = ev.evaluate(DesignVector(10.0, 0, 0, 0, 0))
        assert r.apposition["left"][0] == pytest.approx(0.1)
        assert np.all(np.isinf(r.sf_worst["left"]))

    def test_nonzero_exit_raises(self, tmp_path):
        script = tmp_path / "bad.py"
        script.write_text("import sys; sys.exit(3)")
        ev = ExternalEvaluator(REGION, [sys.executable, str(script)])
        with pytest.raises(EvaluatorError, match="exited with 3"):
            ev.evaluate(REGION.baseline())

    def test_infeasible_never_launches(self, tmp_path):
        ev = ExternalEvaluator(REGION, ["/nonexistent"])
        with pytest.raises(InfeasibleDesignError):
            ev.evaluate(DesignVector(99.0, 0, 0, 0, 0))


class TestConfigValidation:
    def test_peak_gap_must_fit_layer(self):
        with pytest.raises(EvaluatorError):
            SyntheticModelConfig(phi_star=PHI_STAR, peak_gap_mm=0.25)

    def test_bolus_window(self):
        with pytest.raises(EvaluatorError):
            SyntheticModelConfig(phi_star=PHI_STAR, bolus_window=(0.8, 0.4))

    def test_phi_star_must_be_feasible(self):
        cfg = SyntheticModelConfig(phi_star=DesignVector(30.0, 0, 0, 0, 0))
        with pytest.raises(InfeasibleDesignError):
            SyntheticEvaluator(REGION, cfg)

    def test_result_validation(self):
        with pytest.raises(EvaluatorError):
            EvaluationResult({"left": [1.2], "right": [0.5]}, {"left": [1.0], "right": [1.0]})
        with pytest.raises(EvaluatorError):
            EvaluationResult({"left": [0.5], "right": [0.5]}, {"left": [1.0]})
