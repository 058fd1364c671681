import numpy as np
import numpy.testing as npt
import pandas as pd
import pytest

from zimed.counts import Family
from zimed.data import Schema, ThetaVector, free_mask, pack_theta, parameter_names, unpack_theta, validate_dataset
from zimed.errors import (
    ConstantExposure,
    DataError,
    InvalidExposure,
    LengthMismatch,
    MissingValue,
    NonIntegerCount,
    NonPositiveOffset,
)

SCHEMA = Schema(mediator_prefix="taxon_", c2=("age",))


@pytest.fixture
def table():
    return pd.DataFrame({
        "subject_id": ["a", "b", "c"],
        "exposure": [0, 1, 1],
        "age": [30.0, 41.0, 25.0],
        "taxon_1": [0, 5, 12],
        "taxon_2": [3, 0, 0],
        "offset": [1000.0, 2000.0, 1500.0],
        "outcome": [1.2, 0.4, 2.2],
    })


class TestValidateDataset:
    def test_valid_table(self, table):
        data = validate_dataset(table, SCHEMA)
        assert (data.n, data.p, data.r2) == (3, 2, 1)
        assert data.mediator_names == ("taxon_1", "taxon_2")
        assert data.subject_id == ("a", "b", "c")
        npt.assert_allclose(data.zero_proportion(), [1 / 3, 2 / 3])
        assert data.describe().zero_proportion["taxon_1"] == pytest.approx(1 / 3)
        assert not data.mediators.flags.writeable

    def test_negative_count(self, table):
        table.loc[1, "taxon_1"] = -1
        with pytest.raises(NonIntegerCount):
            validate_dataset(table, SCHEMA)

    def test_fractional_count(self, table):
        table["taxon_2"] = [3.5, 0, 0]
        with pytest.raises(NonIntegerCount):
            validate_dataset(table, SCHEMA)

    def test_constant_exposure(self, table):
        table["exposure"] = 1
        with pytest.raises(ConstantExposure):
            validate_dataset(table, SCHEMA)

    def test_exposure_not_binary(self, table):
        table["exposure"] = [0, 1, 2]
        with pytest.raises(InvalidExposure):
            validate_dataset(table, SCHEMA)

    def test_non_positive_offset(self, table):
        table.loc[0, "offset"] = 0.0
        with pytest.raises(NonPositiveOffset):
            validate_dataset(table, SCHEMA)

    def test_missing_outcome(self, table):
        table.loc[2, "outcome"] = np.nan
        with pytest.raises(MissingValue):
            validate_dataset(table, SCHEMA)

    def test_missing_column(self, table):
        with pytest.raises(DataError):
            validate_dataset(table.drop(columns=["age"]), SCHEMA)

    def test_no_mediators_selected(self, table):
        with pytest.raises(DataError):
            validate_dataset(table, Schema(mediator_prefix="otu_"))

    def test_offset_from_depth(self, table):
        table["unassigned"] = [10, 20, 30]
        schema = Schema(mediator_prefix="taxon_", offset=None, unassigned="unassigned")
        data = validate_dataset(table.drop(columns=["offset"]), schema)
        npt.assert_allclose(data.offset, [13.0, 25.0, 42.0])
        npt.assert_allclose(data.depth(), data.offset)

    def test_revalidation_is_identity(self, table):
        data = validate_dataset(table, SCHEMA)
        assert validate_dataset(data) is data

    def test_frame_round_trip(self, table):
        data = validate_dataset(table, SCHEMA)
        again = validate_dataset(data.to_frame(), data.schema())
        npt.assert_array_equal(again.mediators, data.mediators)
        npt.assert_allclose(again.c2, data.c2)
        npt.assert_allclose(again.offset, data.offset)
        assert again.c2_names == ("age",)

    def test_take(self, table):
        data = validate_dataset(table, SCHEMA)
        sub = data.take([2, 2, 0])
        assert sub.subject_id == ("c", "c", "a")
        npt.assert_array_equal(sub.mediators[:, 0], [12, 12, 0])

    def test_direct_construction_rejects_fractional_counts(self, make_dataset):
        with pytest.raises(NonIntegerCount):
            make_dataset([[1.5], [2.0]], exposure=[0, 1])
        with pytest.raises(NonIntegerCount):
            make_dataset([[np.nan], [2.0]], exposure=[0, 1])

    def test_direct_construction_rejects_fractional_exposure(self, make_dataset):
        with pytest.raises(InvalidExposure):
            make_dataset([[1], [2]], exposure=[0.5, 1])

    def test_whole_float_counts_are_accepted(self, make_dataset):
        data = make_dataset([[2.0], [0.0]], exposure=[0.0, 1.0])
        assert data.mediators.dtype == np.int64
        npt.assert_array_equal(data.mediators[:, 0], [2, 0])

    def test_schema_from_config_section(self):
        schema = Schema.from_dict({"c1": "age, sex", "offset": "", "mediator_prefix": "otu", "other": 1})
        assert schema.c1 == ("age", "sex")
        assert schema.offset is None
        assert schema.mediator_prefix == "otu"


class TestThetaVector:
    def test_pack_single_taxon(self):
        theta = ThetaVector(beta_z0=[0.5], beta_l0=[0.0], beta_0=[-3.0], beta_1=[0.6], beta_2=[0.5],
                            sigma_delta=0.316)
        v = pack_theta(theta)
        npt.assert_array_equal(v, [0.5, 0.0, -3.0, 0.6, 0.5, 0.316])
        back = unpack_theta(v, p=1)
        npt.assert_array_equal(back.pack(), v)

    def test_unpack_two_taxa(self):
        theta = unpack_theta(np.arange(11.0), p=2)
        assert len(theta.beta_z0) == len(theta.beta_l0) == len(theta.beta_0) == len(theta.beta_1) == 2
        assert theta.beta_2.shape == (2, 1)
        assert theta.sigma_delta == 10.0

    def test_wrong_length(self):
        with pytest.raises(LengthMismatch):
            unpack_theta(np.zeros(7), p=1)

    def test_multi_column_c2(self):
        v = np.arange(13.0)
        theta = unpack_theta(v, p=2, r2=2)
        assert theta.beta_2.shape == (2, 2)
        npt.assert_array_equal(theta.beta_2[:, 0], [8.0, 9.0])
        npt.assert_array_equal(theta.pack(), v)
        assert len(parameter_names(["a", "b"], r2=2)) == 13

    def test_free_mask_and_pinning(self):
        theta = unpack_theta(np.ones(6), p=1)
        npt.assert_array_equal(free_mask(1, 1, Family.POISSON), [False, False, True, True, True, True])
        pinned = theta.pinned(Family.ZIP)
        assert pinned.beta_z0[0] == 1.0
        assert pinned.beta_l0[0] == np.inf
        assert theta.pinned(Family.NB).beta_z0[0] == -np.inf

    def test_linear_predictor(self, make_dataset):
        data = make_dataset([[1], [2]], exposure=[0, 1], offset=[1.0, np.e], c2=[[0.5], [-1.0]])
        theta = ThetaVector(beta_z0=[0.0], beta_l0=[0.0], beta_0=[1.0], beta_1=[2.0], beta_2=[3.0], sigma_delta=0.1)
        eta = theta.linear_predictor(data, delta=np.array([0.1, -0.1]))
        npt.assert_allclose(eta[:, 0], [1.0 + 1.5 + 0.1, 1.0 + 2.0 - 3.0 + 1.0 - 0.1])
