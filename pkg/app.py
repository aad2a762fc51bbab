import streamlit as st
from streamlit_option_menu import option_menu

import dashboard

# --- 1. CONFIGURAÇÃO DA PÁGINA ---
st.set_page_config(
    layout="wide",
    page_title="LoCoNet",
    page_icon="🗣️",
    initial_sidebar_state="expanded",
)

# --- CSS GLOBAL ---
st.markdown("""
    <style>
    .block-container {
        padding-top: 3.5rem !important;
        padding-bottom: 3rem;
    }
    div[data-testid="stHorizontalBlock"] {
        align-items: center;
    }
    h1, h2, h3, h4, h5 {
        font-family: 'Helvetica Neue', Helvetica, Arial, sans-serif;
        color: #2C3E50;
        font-weight: 600;
    }
    .stCaption {
        color: #666;
        font-size: 0.9rem;
    }
    </style>
    """, unsafe_allow_html=True)

# --- BARRA LATERAL ---
with st.sidebar:
    st.markdown("## 🗣️ LoCoNet")
    st.session_state["run_dir"] = st.text_input("Diretório de resultados (--out)",
                                                st.session_state.get("run_dir", "runs"))
    st.caption("Lê train_log.csv, report.json e ablation_*.csv gravados pela CLI.")

# =========================================================
# 🧭 NAVEGAÇÃO (OPTION MENU)
# =========================================================

styles_menu = {
    "container": {"padding": "0!important", "background-color": "#f8f9fa"},
    "icon": {"color": "#555", "font-size": "16px"},
    "nav-link": {
        "font-size": "16px",
        "text-align": "center",
        "margin": "0px",
        "padding-top": "12px",
        "padding-bottom": "12px",
        "--hover-color": "#eee",
    },
    "nav-link-selected": {"background-color": "#009e60", "font-weight": "600"},
}

selected = option_menu(
    menu_title=None,
    options=["Treino", "Avaliação", "Ablações"],
    icons=["graph-up", "bullseye", "sliders"],
    menu_icon="cast",
    default_index=0,
    orientation="horizontal",
    styles=styles_menu,
)

if selected == "Treino":
    dashboard.render_training_tab()
elif selected == "Avaliação":
    dashboard.render_eval_tab()
elif selected == "Ablações":
    dashboard.render_ablation_tab()
