import io
from pathlib import Path

import pandas as pd
import plotly.express as px
import plotly.graph_objects as go
import streamlit as st

from eval_metrics import FACE_SIZE_BUCKETS
from training import TRAIN_LOG, TRAIN_LOG_COLUMNS
from utils import DataError, load_json

# ==========================================
# 0. UTILITÁRIOS (puros, sem Streamlit)
# ==========================================

def to_excel_horizontal(df, index_col="value"):
    """
    Converte DataFrame para Excel transposto (horizontal).
    Os valores do eixo ficam no cabeçalho e as métricas nas linhas.
    """
    output = io.BytesIO()
    df_t = df.set_index(index_col).T
    with pd.ExcelWriter(output, engine="xlsxwriter") as writer:
        df_t.to_excel(writer, sheet_name="Dados")
        worksheet = writer.sheets["Dados"]
        worksheet.set_column(0, len(df_t.columns), 15)
    return output.getvalue()


def load_train_log(run_dir):
    path = Path(run_dir) / TRAIN_LOG
    if not path.exists():
        raise DataError(f"{path} não encontrado")
    df = pd.read_csv(path)
    missing = [c for c in TRAIN_LOG_COLUMNS if c not in df.columns]
    if missing:
        raise DataError(f"{path}: colunas ausentes {missing}")
    return df


def load_report(run_dir):
    return load_json(Path(run_dir) / "report.json")


def loss_curve_figure(df):
    fig = go.Figure()
    fig.add_trace(go.Scatter(x=df["epoch"], y=df["train_loss"], mode="lines+markers", name="Perda (treino)",
                             line=dict(color="#e67e22", width=3)))
    fig.add_trace(go.Scatter(x=df["epoch"], y=df["val_mAP"], mode="lines+markers", name="mAP (val)",
                             yaxis="y2", line=dict(color="#009e60", width=2, dash="dot")))
    fig.update_layout(
        height=350, margin=dict(l=20, r=20, t=20, b=20), hovermode="x unified",
        xaxis_title="Época", yaxis_title="Perda",
        yaxis2=dict(title="mAP", overlaying="y", side="right", range=[0, 1]),
        legend=dict(orientation="h", yanchor="bottom", y=1.02, xanchor="right", x=1),
    )
    return fig


def bucket_frame(report):
    rows = [{"Balde": f"face {name}", "mAP": report["mAP_by_face_size"].get(name)} for name in FACE_SIZE_BUCKETS]
    for count in ("1", "2", "3"):
        rotulo = "3+" if count == "3" else count
        rows.append({"Balde": f"{rotulo} faces", "mAP": report["mAP_by_face_count"].get(count)})
    return pd.DataFrame(rows).dropna()


def bucket_bar_figure(report):
    df = bucket_frame(report)
    fig = px.bar(df, x="Balde", y="mAP", text_auto=".3f", color="mAP", color_continuous_scale="Greens")
    fig.update_traces(textangle=0, textposition="outside", cliponaxis=False)
    fig.update_layout(height=350, margin=dict(l=20, r=20, t=20, b=20), yaxis_range=[0, 1],
                      coloraxis_showscale=False)
    return fig


def ablation_figure(df):
    axis = df["axis"].iloc[0] if len(df) else ""
    fig = px.bar(df.astype({"value": str}), x="value", y="mAP", text_auto=".3f",
                 hover_data=[c for c in ("AUC", "GFLOPs_per_crop") if c in df.columns])
    fig.update_traces(marker_color="#2C3E50", textposition="outside", cliponaxis=False)
    fig.update_layout(height=350, margin=dict(l=20, r=20, t=20, b=20), xaxis_title=axis, yaxis_range=[0, 1])
    return fig

# ==========================================
# 1. ABAS
# ==========================================

def _run_dir():
    return Path(st.session_state.get("run_dir", "runs"))


def render_training_tab():
    st.markdown("### 📈 Treino")
    try:
        df = load_train_log(_run_dir())
    except DataError as e:
        st.warning(f"⚠️ {e}")
        return
    c1, c2, c3 = st.columns(3)
    c1.metric("Épocas", int(df["epoch"].max()))
    c2.metric("Perda final", f"{df['train_loss'].iloc[-1]:.4f}")
    c3.metric("Melhor mAP (val)", f"{df['val_mAP'].max():.4f}")
    st.plotly_chart(loss_curve_figure(df), use_container_width=True)
    st.dataframe(df, use_container_width=True, hide_index=True)


def render_eval_tab():
    st.markdown("### 🎯 Avaliação")
    try:
        report = load_report(_run_dir())
    except DataError as e:
        st.warning(f"⚠️ {e}")
        return
    c1, c2 = st.columns(2)
    c1.metric("mAP geral", f"{report['mAP']:.4f}")
    c2.metric("AUC", f"{report['AUC']:.4f}")
    st.plotly_chart(bucket_bar_figure(report), use_container_width=True)
    st.caption("Baldes por largura da face (< 64, 64-128, > 128 px) e por número de faces visíveis.")


def render_ablation_tab():
    st.markdown("### 🧪 Ablações")
    tables = sorted(_run_dir().glob("ablation_*.csv"))
    if not tables:
        st.info("Nenhuma tabela de ablação encontrada. Rode `ablate` primeiro.")
        return
    choice = st.selectbox("Tabela", tables, format_func=lambda p: p.stem)
    df = pd.read_csv(choice)
    st.plotly_chart(ablation_figure(df), use_container_width=True)
    st.dataframe(df, use_container_width=True, hide_index=True)
    st.download_button(
        label="📥 Baixar Dados",
        data=to_excel_horizontal(df.drop(columns=["axis"])),
        file_name=f"{choice.stem}.xlsx",
        mime="application/vnd.openxmlformats-officedocument.spreadsheetml.sheet",
        use_container_width=True,
    )
