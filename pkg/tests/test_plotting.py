import pytest

from dualmpc.plotting import emit_plots
from dualmpc.simharness import ControllerStats, StatsBundle, monte_carlo


@pytest.fixture(scope="module")
def bundle(short_bench):
    return monte_carlo(short_bench, 2, ("dmpc", "cempc"), base_seed=0)


def test_empty_bundle_is_refused(tmp_path):
    with pytest.raises(ValueError, match="no runs"):
        emit_plots(StatsBundle({}), tmp_path)
    with pytest.raises(ValueError, match="no runs"):
        emit_plots(StatsBundle({"dmpc": ControllerStats("dmpc", [], {})}), tmp_path)


def test_panels_are_written_and_byte_stable(tmp_path, bundle, short_bench):
    first = emit_plots(bundle, tmp_path / "a", short_bench.plot)
    second = emit_plots(bundle, tmp_path / "b", short_bench.plot)
    names = sorted(p.name for p in first)
    assert names == ["altitude.svg", "input.svg", "mode_prob.svg", "param_mean.svg", "stats_cempc.csv", "stats_dmpc.csv"]
    for a, b in zip(first, second):
        assert a.read_bytes() == b.read_bytes()
    assert b"<svg" in (tmp_path / "a" / "altitude.svg").read_bytes()


def test_plots_from_reloaded_stats(tmp_path, bundle):
    emit_plots(bundle, tmp_path)
    again = StatsBundle.from_dir(tmp_path)
    assert sorted(again.controllers) == ["cempc", "dmpc"]
    paths = emit_plots(again, tmp_path / "replot")
    assert len(paths) == 6
