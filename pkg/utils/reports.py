"""
Report helpers
Training-curve and ablation charts written as standalone HTML, plus the
banner blocks printed by the command-line workflows
"""

import plotly.express as px
import plotly.graph_objects as go

from utils.storage import atomic_write


def banner(title):
    """Print a section banner"""
    print("=" * 60)
    print(title)
    print("=" * 60)


def loss_curve_figure(log, title, value="loss"):
    """
    Line chart of a per-step log

    Args:
        log: DataFrame with a 'step' column, the value column and optionally 'dice'
    """
    fig = go.Figure()
    fig.add_trace(go.Scatter(
        x=log["step"],
        y=log[value],
        name=value,
        mode="lines",
        line=dict(color="#3498db", width=2),
        yaxis="y",
    ))
    if "dice" in log and log["dice"].notna().any():
        evaluated = log[log["dice"].notna()]
        fig.add_trace(go.Scatter(
            x=evaluated["step"],
            y=evaluated["dice"],
            name="Dice",
            mode="lines+markers",
            line=dict(color="#2ecc71", width=2),
            yaxis="y2",
        ))
    fig.update_layout(
        title=title,
        xaxis=dict(title="Step"),
        yaxis=dict(title=value, side="left"),
        yaxis2=dict(title="Dice", overlaying="y", side="right", range=[0, 1]),
        hovermode="x unified",
        height=400,
    )
    return fig


def ablation_figure(table, title):
    """Bar chart of mean Dice per arm with the standard deviation as error bars"""
    fig = px.bar(
        table,
        x="arm",
        y="mean",
        error_y="std",
        color="mean",
        title=title,
        labels={"mean": "Mean Dice", "arm": "Arm"},
        color_continuous_scale="Greens",
    )
    fig.update_layout(showlegend=False, height=400, yaxis=dict(range=[0, 1]))
    return fig


def write_figure(fig, path, div_id="chart"):
    """Write a figure as a standalone HTML page with a fixed element id"""
    html = fig.to_html(include_plotlyjs="cdn", full_html=True, div_id=div_id)
    with atomic_write(path) as handle:
        handle.write(html.encode("utf-8"))
    return path
