import copy
import json

import numpy as np
import pytest

from dualmpc.config import benchmark_from_dict, bundled_path, dump_benchmark, read_benchmark, with_overrides
from dualmpc.model import ConfigurationError


def _doc(bench):
    return bench.to_dict()


def test_bundled_benchmark_contents(bench):
    assert bench.models.n_modes == 2 and bench.models.state_dim == 4 and bench.models.input_dim == 1
    sc = bench.scenario
    assert (sc.N, sc.L, sc.N_s) == (20, 1, 2)
    assert sc.caps.p_min == 0.05
    np.testing.assert_array_equal(bench.models.prior_probs, [0.95, 0.05])
    np.testing.assert_array_equal(bench.models.input_lower, [-0.2])
    np.testing.assert_array_equal(bench.models.input_upper, [0.2])
    assert bench.truth.run_length == 100
    mode, gamma = bench.truth.active(19)
    assert mode == 0 and gamma[0] == 1.0
    mode, gamma = bench.truth.active(20)
    assert mode == 1 and gamma[0] == 0.25
    np.testing.assert_array_equal(bench.truth.reference(59), np.zeros(4))
    np.testing.assert_array_equal(bench.truth.reference(60), [0.0, 0.0, 0.0, 50.0])
    # the cost reference covers the last horizon past the end of the run
    assert bench.cost.reference.shape[0] >= 100 + 20


def test_round_trip_preserves_hash(tmp_path, bench):
    path = tmp_path / "bench.json"
    text = dump_benchmark(bench, path)
    again = read_benchmark(path)
    assert again.config_hash == bench.config_hash
    assert dump_benchmark(again) == text
    np.testing.assert_array_equal(again.models.modes[0].affine.Gu[0], bench.models.modes[0].affine.Gu[0])


def test_hash_tracks_content(bench):
    assert len(bench.config_hash) == 16
    assert read_benchmark().config_hash == bench.config_hash
    assert with_overrides(bench, scenario={"N_s": 3}).config_hash != bench.config_hash
    # numerically equal spellings normalise to the same document
    raw = json.loads(bundled_path().read_text())
    raw["scenario"]["p_min"] = 0.050
    assert benchmark_from_dict(raw).config_hash == bench.config_hash


def test_with_overrides_merges_sections(bench):
    short = with_overrides(bench, scenario={"L": 0}, rng_seed=7)
    assert short.scenario.L == 0 and short.scenario.N == 20 and short.rng_seed == 7
    assert bench.scenario.L == 1


def test_probabilities_must_sum_to_one(bench):
    doc = _doc(bench)
    doc["modes"][0]["prior_prob"] = "0.7"
    doc["modes"][1]["prior_prob"] = "0.2"
    with pytest.raises(ConfigurationError, match="mode probabilities sum to 0.9"):
        benchmark_from_dict(doc)


def test_noise_must_be_positive_definite(bench):
    doc = _doc(bench)
    doc["modes"][0]["noise_cov"] = [["0"] * 4 for _ in range(4)]
    with pytest.raises(ConfigurationError, match=r"modes\[0\]\.noise_cov: noise covariance not positive definite"):
        benchmark_from_dict(doc)


@pytest.mark.parametrize(
    "edit,message",
    [
        (lambda d: d.pop("plant"), "missing key 'plant'"),
        (lambda d: d["modes"][1].pop("prior_mean"), r"modes\[1\]: missing key 'prior_mean'"),
        (lambda d: d["scenario"].update(N="20"), "scenario.N: expected an integer"),
        (lambda d: d["scenario"].update(p_min="0.6"), "scenario.p_min"),
        (lambda d: d["scenario"].update(L=30), "shorter than N"),
        (lambda d: d["scenario"]["solver"].update(tolerance=1), "unknown key 'tolerance'"),
        (lambda d: d["scenario"].update(cempc_weighting="max"), "cempc_weighting"),
        (lambda d: d["truth"]["mode_schedule"][1].update(mode=2), "index 2 out of range"),
        (lambda d: d["truth"].update(x0=["0"]), "1 entries for 4 states"),
        (lambda d: d["plant"].update(Ts="-0.2"), "Ts must be positive"),
        (lambda d: d["cost"].update(R=[["nan"]]), "non-finite"),
        (lambda d: d["modes"][0].update(kind="neural"), "unknown mode kind"),
        (lambda d: d["truth"]["reference_schedule"][1].update(step=500), "beyond run length"),
    ],
)
def test_invalid_documents(bench, edit, message):
    doc = copy.deepcopy(_doc(bench))
    edit(doc)
    with pytest.raises(ConfigurationError, match=message):
        benchmark_from_dict(doc)


def test_invalid_json_is_reported(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{ not json")
    with pytest.raises(ConfigurationError, match="invalid JSON"):
        read_benchmark(bad)
