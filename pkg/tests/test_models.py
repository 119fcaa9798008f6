import json

import numpy as np
import pytest

from hypercloud.common.errors import DataError, InputTooShort, ShapeMismatch
from hypercloud.nn.weights import dumps
from hypercloud.services.model_service import (
    MANIFEST_NAME,
    ModelKind,
    build_liunet_1d,
    build_model,
    build_unet2d_simple,
    layer_shapes,
    liunet_length_chain,
    load_model,
    replication_factor,
    save_model,
    scenario_input_length,
    size_report,
)


class TestSpectralNet:
    def test_length_chain(self):
        assert liunet_length_chain(98) == [98, 93, 46, 41, 20, 15, 7, 2, 1]

    @pytest.mark.parametrize("length", [91, 96, 98, 99])
    def test_parameter_count_is_fixed(self, length):
        assert build_liunet_1d(length).parameter_count == 4491

    def test_shortest_input(self):
        assert build_liunet_1d(91).input_shape == (91, 1)
        with pytest.raises(InputTooShort):
            build_liunet_1d(90)
        with pytest.raises(InputTooShort):
            build_liunet_1d(5)

    def test_output_is_a_distribution(self, rng):
        model = build_liunet_1d(96, seed=2)
        probs = model.predict(rng.standard_normal((5, 96, 1)))
        assert probs.shape == (5, 3)
        np.testing.assert_allclose(probs.sum(axis=-1), 1.0)

    def test_input_shape_is_checked(self):
        with pytest.raises(ShapeMismatch):
            build_liunet_1d(96).predict(np.zeros((1, 95, 1)))

    def test_seeded(self):
        a, b = build_liunet_1d(96, seed=4), build_liunet_1d(96, seed=4)
        assert dumps(a.layers) == dumps(b.layers)
        assert dumps(a.layers) != dumps(build_liunet_1d(96, seed=5).layers)


class TestTileNet:
    @pytest.mark.parametrize("channels, expected", [(1, 4005), (6, 4275), (98, 9243)])
    def test_parameter_count(self, channels, expected):
        assert build_unet2d_simple(channels, tile_size=8).parameter_count == expected == 54 * channels + 3951

    def test_layer_shapes(self):
        shapes = layer_shapes(build_unet2d_simple(1))
        assert shapes["enc1_relu"] == (252, 252, 6)
        assert shapes["enc1_pool"] == (126, 126, 6)
        assert shapes["enc2_pool"] == (63, 63, 12)
        assert shapes["dec1_concat"] == (126, 126, 24)
        assert shapes["softmax"] == (252, 252, 3)

    def test_tile_size_must_pool_twice(self):
        with pytest.raises(ShapeMismatch):
            build_unet2d_simple(3, tile_size=30)

    def test_needs_channels(self):
        with pytest.raises(ValueError):
            build_unet2d_simple(0)

    def test_per_pixel_distribution(self, rng):
        probs = build_unet2d_simple(2, tile_size=8).predict(rng.standard_normal((2, 8, 8, 2)))
        assert probs.shape == (2, 8, 8, 3)
        np.testing.assert_allclose(probs.sum(axis=-1), 1.0)


class TestBuildModel:
    def test_dispatch(self):
        assert build_model("liunet1d", 91).kind == ModelKind.LIUNET_1D
        assert build_model(ModelKind.UNET_2D, 3, tile_size=8).input_shape == (8, 8, 3)

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            build_model("resnet", 3)

    @pytest.mark.parametrize("channels, factor", [(1, 91), (6, 16), (91, 1), (98, 1), (45, 3)])
    def test_replication_factor(self, channels, factor):
        assert replication_factor(channels) == factor
        assert scenario_input_length(channels) >= 91


class TestSizeReport:
    def test_spectral_net(self):
        model = build_liunet_1d(98)
        report = size_report(model)
        assert report.parameter_count == 4491
        assert report.bytes_in_memory == 4 * 4491
        assert report.bytes_on_disk == len(dumps(model.layers))
        assert report.macs == 3348 + 17712 + 19440 + 5184 + 72
        assert [l.name for l in report.layers if l.parameters] == [
            "block1_conv", "block2_conv", "block3_conv", "block4_conv", "dense",
        ]

    def test_round_trip(self):
        report = size_report(build_unet2d_simple(2, tile_size=8))
        assert type(report).from_dict(report.to_dict()) == report


class TestModelFiles:
    def test_save_and_load(self, tmp_path, rng):
        model = build_liunet_1d(91, seed=3)
        save_model(model, tmp_path / "m")
        loaded = load_model(tmp_path / "m")
        assert loaded.kind == ModelKind.LIUNET_1D
        assert loaded.dtype == np.float32
        assert loaded.parameter_count == 4491
        batch = rng.standard_normal((4, 91, 1)).astype(np.float32)
        np.testing.assert_allclose(loaded.predict(batch), model.as_inference().predict(batch), atol=1e-6)

    def test_manifest_schema(self, tmp_path):
        save_model(build_unet2d_simple(1, tile_size=8), tmp_path)
        data = json.loads((tmp_path / MANIFEST_NAME).read_text())
        data["schema"] = "modelmanifest/0"
        (tmp_path / MANIFEST_NAME).write_text(json.dumps(data))
        with pytest.raises(DataError):
            load_model(tmp_path)
