import pathlib
from typing import Dict, List, Optional, Sequence

import numpy as np
import plotly.graph_objects as go
from plotly.subplots import make_subplots

from ..common.constants import Constants
from ..common.errors import IoFailure
from .bandselect_service import CorrelationClusters, PcaResult
from .benchmark_service import BenchResult
from .hypercube_service import DatasetStats

_FONT = dict(family="Inter, sans-serif", color="#374151")
_TITLE_FONT = dict(size=18, family="Inter, sans-serif", color="#111827")


def _style(fig: go.Figure, title: str, height: int = 380) -> go.Figure:
    fig.update_layout(
        title=dict(text=title, font=_TITLE_FONT, x=0.05, y=0.95),
        height=height,
        margin=dict(l=60, r=30, t=50, b=50, pad=10),
        plot_bgcolor='rgba(0,0,0,0)',
        paper_bgcolor='rgba(0,0,0,0)',
        font=_FONT,
        legend=dict(
            orientation="h",
            yanchor="bottom",
            y=1.02,
            xanchor="center",
            x=0.5,
            bgcolor="rgba(255,255,255,0.9)",
            bordercolor="rgba(0,0,0,0.1)",
            borderwidth=1
        ),
    )
    fig.update_xaxes(showgrid=False, showline=True, linewidth=1, linecolor='#E5E7EB')
    fig.update_yaxes(showgrid=True, gridwidth=1, gridcolor='#F3F4F6', showline=True,
                     linewidth=1, linecolor='#E5E7EB')
    return fig


class ChartService:
    """Plotly figures for dataset statistics, band selection, training and benchmarks."""

    @staticmethod
    def generate_class_distribution_chart(stats: DatasetStats) -> go.Figure:
        """Tile count per cloud-coverage bin, with the class mix of each bin on a second axis."""
        edges = stats.bin_edges
        labels = [f"{100 * lo:.0f}-{100 * hi:.0f}%" for lo, hi in zip(edges[:-1], edges[1:])]

        fig = make_subplots(specs=[[{"secondary_y": True}]])
        fig.add_trace(go.Bar(
            name='Tiles',
            x=labels,
            y=list(stats.coverage_histogram),
            hovertemplate='<b>%{x}</b><br>Tiles: %{y}<extra></extra>'
        ), secondary_y=False)
        for class_id, class_name in enumerate(Constants.CLASS_NAMES):
            fig.add_trace(go.Scatter(
                name=class_name,
                x=labels,
                y=[100 * row[class_id] for row in stats.bin_class_fractions],
                mode='lines+markers',
                hovertemplate='<b>%{x}</b><br>' + class_name + ': %{y:.1f}%<extra></extra>'
            ), secondary_y=True)

        _style(fig, "Cloud Coverage per Tile")
        fig.update_xaxes(title_text="Cloud coverage (Thin + Thick)")
        fig.update_yaxes(title_text="Tiles", secondary_y=False)
        fig.update_yaxes(title_text="Class share [%]", range=[0, 100], secondary_y=True)
        return fig

    @staticmethod
    def generate_pca_chart(result: PcaResult, clusters: Optional[CorrelationClusters] = None,
                           wavelengths: Optional[Sequence[float]] = None) -> go.Figure:
        """First-component weights per channel next to the correlation matrix."""
        channels = np.arange(len(result.pc1_weights))
        x = list(wavelengths) if wavelengths is not None else channels.tolist()
        cols = 2 if clusters is not None else 1
        fig = make_subplots(rows=1, cols=cols, subplot_titles=(
            ("PC1 weights", "Pearson correlation") if cols == 2 else ("PC1 weights",)))
        fig.add_trace(go.Scatter(
            name='PC1 weight',
            x=x,
            y=result.pc1_weights.tolist(),
            mode='lines',
            hovertemplate='Channel %{x}<br>Weight: %{y:.4f}<extra></extra>'
        ), row=1, col=1)

        if clusters is not None:
            fig.add_trace(go.Heatmap(
                z=clusters.matrix,
                zmin=-1,
                zmax=1,
                colorscale='Greys',
                showscale=True,
            ), row=1, col=2)
            # outline each contiguous cluster on the diagonal
            for first, last in clusters.clusters:
                fig.add_shape(
                    type="rect", x0=first - 0.5, x1=last + 0.5, y0=first - 0.5, y1=last + 0.5,
                    line=dict(color="#DC2626", width=1), xref="x2", yref="y2",
                )
        _style(fig, "Channel Importance", height=420)
        fig.update_xaxes(title_text="Wavelength [nm]" if wavelengths is not None else "Channel", row=1, col=1)
        return fig

    @staticmethod
    def generate_loss_chart(curves: Dict[str, List[Dict]]) -> go.Figure:
        """Train (solid) and validation (dashed) loss per epoch for each named run."""
        fig = go.Figure()
        for name, records in curves.items():
            epochs = [r["epoch"] for r in records]
            fig.add_trace(go.Scatter(
                name=f"{name} train",
                x=epochs,
                y=[r["train_loss"] for r in records],
                mode='lines+markers',
            ))
            if any(r.get("val_loss") is not None for r in records):
                fig.add_trace(go.Scatter(
                    name=f"{name} val",
                    x=epochs,
                    y=[r.get("val_loss") for r in records],
                    mode='lines',
                    line=dict(dash='dash'),
                ))
        _style(fig, "Training Loss")
        fig.update_layout(xaxis_title="Epoch", yaxis_title="Cross-entropy", hovermode='x unified')
        return fig

    @staticmethod
    def generate_benchmark_chart(results: Sequence[BenchResult]) -> go.Figure:
        """Mean inference seconds per tile and in-memory size, grouped by channel scenario."""
        fig = make_subplots(rows=1, cols=2, subplot_titles=("Inference time per tile [s]", "Model size in memory [KB]"))
        for model_name in dict.fromkeys(r.model_name for r in results):
            rows = sorted((r for r in results if r.model_name == model_name), key=lambda r: r.channels)
            scenarios = [f"{r.channels} ch" for r in rows]
            fig.add_trace(go.Bar(
                name=model_name,
                x=scenarios,
                y=[r.mean_seconds for r in rows],
                error_y=dict(
                    type='data',
                    symmetric=False,
                    array=[r.max_seconds - r.mean_seconds for r in rows],
                    arrayminus=[r.mean_seconds - r.min_seconds for r in rows],
                ),
                offsetgroup=model_name,
            ), row=1, col=1)
            fig.add_trace(go.Bar(
                name=model_name,
                x=scenarios,
                y=[r.size.bytes_in_memory / 1000 for r in rows],
                offsetgroup=model_name,
                showlegend=False,
            ), row=1, col=2)
        _style(fig, "Model Benchmarks")
        fig.update_layout(barmode='group', bargap=0.4)
        fig.update_yaxes(type="log", row=1, col=1)
        return fig

    @staticmethod
    def save_figure(fig: go.Figure, path) -> pathlib.Path:
        """Standalone HTML; plotly.js is loaded from the CDN."""
        path = pathlib.Path(path)
        try:
            fig.write_html(str(path), include_plotlyjs="cdn", full_html=True)
        except OSError as e:
            raise IoFailure(f"cannot write {path}: {e}") from e
        return path
