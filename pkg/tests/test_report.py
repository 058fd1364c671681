import json

import numpy as np
import pandas as pd
import pytest

from zimed.data import Schema
from zimed.errors import OutputError
from zimed.fiducial import IntervalMethod, IntervalSummary
from zimed.report import REPORT_COLUMNS, build_report, emit_summary_stats
from zimed.storage import ArtifactStore


def summaries(method, names, lower=-1.0, upper=1.0):
    return {name: IntervalSummary(name, 0.1, lower, upper, 0.05, method, gen_p_value=0.4) for name in names}


class TestBuildReport:
    def test_row_order_and_columns(self, state):
        report = build_report(state)
        frame = report.to_frame()
        assert list(frame.columns) == list(REPORT_COLUMNS)
        assert list(frame["taxon"]) == ["taxon_1", "NDE"]

    def test_missing_methods_are_none(self, state):
        report = build_report(state, delta=summaries(IntervalMethod.DELTA, ["NDE", "taxon_1"]))
        row = report.rows[0]
        assert row["gci_lower"] is None and row["npb_width"] is None
        assert row["delta_width"] == pytest.approx(2.0)
        assert row["estimate"] == pytest.approx(state.effects.nie[0])
        assert row["point_estimate"] == row["estimate"]

    def test_fiducial_mode_is_the_estimate(self, state):
        fiducial = summaries(IntervalMethod.FIDUCIAL_HDI, ["NDE", "taxon_1"])
        report = build_report(state, fiducial=fiducial, metadata={"seed": 3})
        nde = report.rows[1]
        assert nde["estimate"] == 0.1
        assert nde["gen_p_value"] == 0.4
        assert nde["point_estimate"] == pytest.approx(state.effects.nde)
        assert report.to_dict()["metadata"] == {"seed": 3}


class TestSummaryStats:
    def test_zero_proportion_and_quantiles(self, make_dataset):
        counts = np.column_stack([[0] * 7 + [1, 2, 3], np.full(10, 4)])
        taxa, depth = emit_summary_stats(make_dataset(counts, exposure=[0, 1] * 5))
        first, constant = taxa.iloc[0], taxa.iloc[1]
        assert first["zero_prop"] == pytest.approx(0.7)
        assert first["median"] == 0.0
        assert first["max"] == 3.0
        assert first["skewness"] > 0
        assert not first["degenerate"]
        assert constant["degenerate"]
        assert constant["skewness"] == 0.0
        assert list(depth.columns) == ["subject_id", "depth", "offset"]
        assert depth["depth"].iloc[9] == 7.0


class TestArtifactStore:
    def test_json_is_sorted_with_nulls(self, tmp_path):
        store = ArtifactStore(tmp_path / "out")
        path = store.write_json("report.json", {"b": np.float64(np.nan), "a": np.arange(2), "c": IntervalMethod.NPB})
        text = path.read_text()
        assert text.index('"a"') < text.index('"b"')
        assert json.loads(text) == {"a": [0, 1], "b": None, "c": "NPB"}

    def test_csv_float_format(self, tmp_path):
        store = ArtifactStore(tmp_path)
        path = store.write_csv("t.csv", pd.DataFrame({"x": [1 / 3], "y": [None]}))
        assert path.read_text() == "x,y\n0.3333333333,\n"

    def test_dataset_round_trip(self, tmp_path, sim_data):
        store = ArtifactStore(tmp_path)
        path = store.write_dataset("data.csv", sim_data)
        again = ArtifactStore.read_dataset(path, sim_data.schema())
        np.testing.assert_array_equal(again.mediators, sim_data.mediators)
        np.testing.assert_allclose(again.outcome, sim_data.outcome, rtol=1e-9)

    def test_dataset_roles_written_beside_csv(self, tmp_path, sim_data):
        store = ArtifactStore(tmp_path)
        path = store.write_dataset("data.csv", sim_data)
        assert (tmp_path / "data.schema.json").exists()
        schema = ArtifactStore.read_schema(path)
        assert schema == sim_data.schema()
        again = ArtifactStore.read_dataset(path, schema)
        assert again.c1.shape == (sim_data.n, 2)
        assert again.c2_names == ("c2",) and again.c3_names == ("c3",)
        np.testing.assert_allclose(again.c1, sim_data.c1, rtol=1e-9)

    def test_csv_without_roles(self, tmp_path):
        path = tmp_path / "plain.csv"
        path.write_text("subject_id,exposure,taxon_1,offset,outcome\na,0,3,1,0.5\n")
        assert ArtifactStore.read_schema(path) is None

    def test_unreadable_roles(self, tmp_path):
        (tmp_path / "bad.schema.json").write_text("{not json")
        with pytest.raises(OutputError):
            ArtifactStore.read_schema(tmp_path / "bad.csv")

    def test_missing_input(self, tmp_path):
        with pytest.raises(OutputError):
            ArtifactStore.read_dataset(tmp_path / "absent.csv", Schema())

    def test_unwritable_directory(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        with pytest.raises(OutputError):
            ArtifactStore(blocker / "out").write_json("report.json", {})
