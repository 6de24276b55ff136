import numpy as np
import pytest

from evgnn.graph_builder import SearchParams
from evgnn.model import (DenseParams, LayerParams, ModelConfigError,
                         QuantizedModel, calibration_model, load_model,
                         model_from_json, model_to_json, random_model,
                         save_model)


class TestValidation:
    def test_weights_shape_checked(self):
        with pytest.raises(ModelConfigError):
            LayerParams(c_in=2, c_out=3, weights=np.zeros((3, 3)),
                        bias=np.zeros(3), requant=(1, 0))

    def test_weight_magnitude_checked(self):
        w = np.zeros((1, 3))
        w[0, 0] = 128
        with pytest.raises(ModelConfigError):
            LayerParams(c_in=1, c_out=1, weights=w, bias=np.zeros(1),
                        requant=(1, 0))

    def test_requant_31_bit(self):
        with pytest.raises(ModelConfigError):
            LayerParams(c_in=1, c_out=1, weights=np.zeros((1, 3)),
                        bias=np.zeros(1), requant=(2**31, 0))

    def test_layer_chain_checked(self):
        m = random_model(0)
        bad = m.layers[:-1] + [LayerParams(
            c_in=m.layers[-1].c_in + 1, c_out=m.layers[-1].c_out,
            weights=np.zeros((m.layers[-1].c_out, m.layers[-1].c_in + 3)),
            bias=np.zeros(m.layers[-1].c_out), requant=(1, 0))]
        with pytest.raises(ModelConfigError):
            QuantizedModel(width=m.width, height=m.height, layers=bad,
                           fc=m.fc, search=m.search)

    def test_fc_in_dim_checked(self):
        m = random_model(0)
        bad_fc = DenseParams(in_dim=m.fc.in_dim + 1, out_dim=2,
                             weights=np.zeros((2, m.fc.in_dim + 1)),
                             bias=np.zeros(2))
        with pytest.raises(ModelConfigError):
            QuantizedModel(width=m.width, height=m.height, layers=m.layers,
                           fc=bad_fc, search=m.search)


class TestSerialization:
    def test_round_trip(self, small_model, tmp_path):
        path = tmp_path / "model.json"
        save_model(small_model, str(path))
        back = load_model(str(path))
        for a, b in zip(small_model.layers, back.layers):
            assert np.array_equal(a.weights, b.weights)
            assert np.array_equal(a.bias, b.bias)
            assert a.requant == b.requant
            assert a.pos_requant == b.pos_requant
        assert np.array_equal(small_model.fc.weights, back.fc.weights)
        assert back.search == small_model.search
        assert back.classes == small_model.classes
        assert back.input_encoding == small_model.input_encoding

    def test_grid_consistency_checked(self, small_model):
        doc = model_to_json(small_model)
        doc["grid"]["Gx"] = 99
        with pytest.raises(ModelConfigError):
            model_from_json(doc)

    def test_missing_field(self):
        with pytest.raises(ModelConfigError):
            model_from_json({"sensor": {"W": 8, "H": 8}})

    def test_hw_block_preserved(self, small_model, tmp_path):
        small_model.hw = {"clock_hz": 1e8}
        path = tmp_path / "model.json"
        save_model(small_model, str(path))
        assert load_model(str(path)).hw == {"clock_hz": 1e8}


class TestCalibrationModel:
    def test_architecture(self):
        m = calibration_model()
        assert (m.width, m.height) == (120, 100)
        assert [l.c_out for l in m.layers] == [24, 40, 40, 24]
        assert (m.n_cells_x, m.n_cells_y) == (8, 7)
        assert m.search.shape == "prism"

    def test_parameter_budget(self):
        m = calibration_model()
        conv = sum(l.weights.size for l in m.layers)
        total = conv + m.fc.weights.size
        assert conv == 3800
        assert 6_000 <= total <= 7_000

    def test_depth_ratio(self):
        m = calibration_model()
        depths = [l.c_in + 2 for l in m.layers]
        assert 2.35 <= sum(depths) / max(depths) <= 2.95
