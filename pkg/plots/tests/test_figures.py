"""Figure rendering from the golden report fixture."""

import json
from pathlib import Path

import numpy as np
import pytest
from matplotlib.collections import PolyCollection

from nuqls_plots.cli import main
from nuqls_plots.figures import PlotJob, load_report, plot_band, plot_sev, plot_violin

GOLDEN = Path(__file__).parent / "fixtures" / "golden_report.json"


def violin_count(ax):
    return sum(isinstance(c, PolyCollection) for c in ax.collections)


class TestAcceptanceGolden:
    """Secondary acceptance: every figure kind renders from the fixture."""

    def test_band_renders(self, tmp_path):
        out = tmp_path / "band.png"
        fig = plot_band(PlotJob(str(GOLDEN), "band", str(out)))
        assert out.exists() and out.stat().st_size > 0
        report = load_report(GOLDEN)
        assert len(fig.axes) == len(report["band"]["panels"])

    def test_sev_renders_two_panels(self, tmp_path):
        out = tmp_path / "sev.png"
        fig = plot_sev(PlotJob(str(GOLDEN), "sev", str(out)))
        assert out.exists() and out.stat().st_size > 0
        # two stacked sweep panels (plus the twin loss axis)
        assert len(fig.axes) >= 2

    def test_violin_count_equals_group_count(self, tmp_path):
        out = tmp_path / "violin.png"
        fig = plot_violin(PlotJob(str(GOLDEN), "violin", str(out)))
        assert out.exists() and out.stat().st_size > 0
        report = load_report(GOLDEN)
        methods = sorted(report["vmsp"])
        assert len(fig.axes) == len(methods)
        for ax, method in zip(fig.axes, methods):
            expected = sum(1 for v in report["vmsp"][method].values() if len(v))
            assert violin_count(ax) == expected


class TestRenderingBehavior:
    def test_rerender_identical_bytes(self, tmp_path):
        blobs = []
        for name in ("a.png", "b.png"):
            out = tmp_path / name
            plot_violin(PlotJob(str(GOLDEN), "violin", str(out)))
            blobs.append(out.read_bytes())
        assert blobs[0] == blobs[1]

    def test_empty_group_omitted_with_warning(self, tmp_path, caplog):
        report = load_report(GOLDEN)
        report["vmsp"] = {"nuqls": {"id_correct": report["vmsp"]["nuqls"]["id_correct"],
                                    "id_incorrect": [],
                                    "ood": report["vmsp"]["nuqls"]["ood"]}}
        fixture = tmp_path / "degraded.json"
        fixture.write_text(json.dumps(report))
        out = tmp_path / "violin.png"
        with caplog.at_level("WARNING"):
            fig = plot_violin(PlotJob(str(fixture), "violin", str(out)))
        assert "empty" in caplog.text
        assert violin_count(fig.axes[0]) == 2

    def test_missing_fields_named(self, tmp_path):
        report = {"schema_version": 1, "kind": "toy"}
        fixture = tmp_path / "empty.json"
        fixture.write_text(json.dumps(report))
        with pytest.raises(ValueError, match="band"):
            plot_band(PlotJob(str(fixture), "band", str(tmp_path / "x.png")))
        with pytest.raises(ValueError, match="sev"):
            plot_sev(PlotJob(str(fixture), "sev", str(tmp_path / "x.png")))
        with pytest.raises(ValueError, match="vmsp"):
            plot_violin(PlotJob(str(fixture), "violin", str(tmp_path / "x.png")))

    def test_schema_version_checked(self, tmp_path):
        fixture = tmp_path / "bad.json"
        fixture.write_text(json.dumps({"schema_version": 99}))
        with pytest.raises(ValueError, match="schema"):
            load_report(fixture)

    def test_unknown_kind_rejected(self):
        with pytest.raises(ValueError, match="kind"):
            PlotJob(str(GOLDEN), "surface", "x.png")


class TestCli:
    def test_all_kinds_via_cli(self, tmp_path):
        for kind in ("band", "sev", "violin"):
            out = tmp_path / f"{kind}.png"
            assert main([kind, "--in", str(GOLDEN), "--out", str(out)]) == 0
            assert out.exists() and out.stat().st_size > 0

    def test_cli_error_on_missing_payload(self, tmp_path):
        fixture = tmp_path / "empty.json"
        fixture.write_text(json.dumps({"schema_version": 1}))
        out = tmp_path / "x.png"
        assert main(["band", "--in", str(fixture), "--out", str(out)]) == 1
