import numpy as np
import pytest

from hypercloud.common.errors import IoFailure
from hypercloud.services.bandselect_service import correlation_clusters, pca, standardize
from hypercloud.services.benchmark_service import BenchResult
from hypercloud.services.chart_service import ChartService
from hypercloud.services.hypercube_service import class_distribution
from hypercloud.services.model_service import SizeReport
from conftest import make_tiles


def bench(name, channels, seconds):
    return BenchResult(name, "kind", channels, 1, 3, seconds, 0.5 * seconds, 2 * seconds,
                       SizeReport(100, 400, 900, 1000))


def test_class_distribution_chart():
    stats = class_distribution([t.mask for t in make_tiles(count=4)], bins=5)
    fig = ChartService.generate_class_distribution_chart(stats)
    assert len(fig.data) == 4
    assert list(fig.data[0].y) == list(stats.coverage_histogram)
    assert fig.data[0].x[0] == "0-20%"


def test_pca_chart_outlines_clusters(rng):
    x = rng.standard_normal((100, 5))
    x[:, 1] = x[:, 0]
    clusters = correlation_clusters(x)
    fig = ChartService.generate_pca_chart(pca(standardize(x).data), clusters)
    assert [trace.type for trace in fig.data] == ["scatter", "heatmap"]
    assert len(fig.layout.shapes) == len(clusters.clusters)


def test_pca_chart_against_wavelengths(rng):
    wavelengths = [450.0, 550.0, 650.0]
    fig = ChartService.generate_pca_chart(pca(rng.standard_normal((20, 3))), wavelengths=wavelengths)
    assert len(fig.data) == 1
    assert list(fig.data[0].x) == wavelengths


def test_loss_chart():
    curves = {
        "with-val": [{"epoch": 1, "train_loss": 1.0, "val_loss": 1.1}, {"epoch": 2, "train_loss": 0.5, "val_loss": 0.7}],
        "train-only": [{"epoch": 1, "train_loss": 0.9, "val_loss": None}],
    }
    fig = ChartService.generate_loss_chart(curves)
    assert [trace.name for trace in fig.data] == ["with-val train", "with-val val", "train-only train"]
    assert fig.data[1].line.dash == "dash"


def test_benchmark_chart():
    results = [bench("LiuNet-1D", 98, 2.0), bench("UNet-Simple-2D", 98, 0.01), bench("UNet-Simple-2D", 6, 0.005)]
    fig = ChartService.generate_benchmark_chart(results)
    assert len(fig.data) == 4
    assert list(fig.data[2].x) == ["6 ch", "98 ch"]
    assert fig.layout.yaxis.type == "log"
    np.testing.assert_allclose(fig.data[0].error_y.array, [2.0])


def test_save_figure(tmp_path):
    fig = ChartService.generate_loss_chart({"a": [{"epoch": 1, "train_loss": 1.0}]})
    path = ChartService.save_figure(fig, tmp_path / "loss.html")
    assert "cdn.plot.ly" in path.read_text()
    with pytest.raises(IoFailure):
        ChartService.save_figure(fig, tmp_path / "missing" / "loss.html")
