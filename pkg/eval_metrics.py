import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
from scipy.stats import rankdata

from utils import DataError, UndefinedMetricError

# --- 1. CONFIGURAÇÃO ---
CSV_COLUMNS = ["scene_id", "frame_index", "entity_id", "score", "label", "face_width", "faces_visible"]
SMALL_MAX_WIDTH = 64     # small: largura < 64
MEDIUM_MAX_WIDTH = 128   # medium: 64..128; large: > 128
FACE_SIZE_BUCKETS = ("small", "medium", "large")
FACE_COUNT_BUCKETS = (1, 2, 3)


@dataclass(frozen=True)
class PredictionRecord:
    scene_id: str
    frame_index: int
    entity_id: str
    score: float
    label: int
    face_width: float = float("nan")
    faces_visible: int = 0

    @property
    def predicted(self):
        """Logit > 0 => falando."""
        return int(self.score > 0)


@dataclass
class EvalReport:
    mAP: float
    AUC: float
    mAP_by_face_size: dict = field(default_factory=dict)
    mAP_by_face_count: dict = field(default_factory=dict)
    support: dict = field(default_factory=dict)

    def to_dict(self):
        d = asdict(self)
        d["mAP_by_face_count"] = {str(k): v for k, v in self.mAP_by_face_count.items()}
        return d

    def to_text(self):
        linhas = [f"mAP geral: {self.mAP:.4f}", f"AUC: {self.AUC:.4f}" if not math.isnan(self.AUC) else "AUC: indefinida"]
        for name in FACE_SIZE_BUCKETS:
            n = self.support.get(f"size_{name}", 0)
            val = self.mAP_by_face_size.get(name)
            linhas.append(f"  face {name:<6} (n={n}): " + (f"{val:.4f}" if val is not None else "ausente"))
        for count in FACE_COUNT_BUCKETS:
            n = self.support.get(f"count_{count}", 0)
            val = self.mAP_by_face_count.get(count)
            rotulo = f"{count}+" if count == 3 else str(count)
            linhas.append(f"  {rotulo} faces visíveis (n={n}): " + (f"{val:.4f}" if val is not None else "ausente"))
        return "\n".join(linhas)

# ==========================================
# 1. MÉTRICAS
# ==========================================

def _arrays(records):
    scores = np.array([r.score for r in records], dtype=np.float64)
    labels = np.array([r.label for r in records], dtype=np.int64)
    if not np.all(np.isfinite(scores)):
        raise DataError("scores não finitos nas predições")
    return scores, labels


def ranking(records):
    """Ordem decrescente de score; empate desfeito por (scene_id, frame_index, entity_id)."""
    keys = sorted(range(len(records)), key=lambda i: (
        -records[i].score, records[i].scene_id, records[i].frame_index, records[i].entity_id))
    return np.array(keys, dtype=np.int64)


def average_precision(records):
    """AP não interpolada: Σ_k P(k)·Δrecall(k) sobre os positivos."""
    records = list(records)
    _, labels = _arrays(records)
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise UndefinedMetricError("AP indefinida: nenhum positivo")
    ordered = labels[ranking(records)]
    hits = np.cumsum(ordered)
    ranks = np.arange(1, len(ordered) + 1)
    return float(np.sum((hits / ranks)[ordered == 1]) / n_pos)


def auc(records):
    """Mann-Whitney U; empates contam 1/2."""
    records = list(records)
    scores, labels = _arrays(records)
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC indefinida: apenas uma classe presente")
    ranks = rankdata(scores, method="average")
    u = ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def face_size_bucket(width):
    if width < SMALL_MAX_WIDTH:
        return "small"
    if width <= MEDIUM_MAX_WIDTH:
        return "medium"
    return "large"


def face_count_bucket(n):
    return min(max(int(n), 1), 3)


def _maybe_ap(records):
    try:
        return average_precision(records)
    except UndefinedMetricError:
        return None


def bucketed_map(records, meta=None):
    """
    mAP geral + mAP por tamanho de face e por número de faces visíveis.
    meta opcional: dict (scene_id, frame_index, entity_id) -> (face_width, faces_visible);
    sem meta, usa os campos do próprio registro. Balde sem positivos fica ausente.
    """
    records = list(records)
    if meta is not None:
        records = [PredictionRecord(r.scene_id, r.frame_index, r.entity_id, r.score, r.label,
                                    *meta[(r.scene_id, r.frame_index, r.entity_id)]) for r in records]
    overall = average_precision(records)
    try:
        overall_auc = auc(records)
    except UndefinedMetricError:
        overall_auc = float("nan")
    by_size, by_count = {}, {}
    for r in records:
        by_size.setdefault(face_size_bucket(r.face_width), []).append(r)
        by_count.setdefault(face_count_bucket(r.faces_visible), []).append(r)
    report = EvalReport(mAP=overall, AUC=overall_auc)
    for name in FACE_SIZE_BUCKETS:
        bucket = by_size.get(name, [])
        report.support[f"size_{name}"] = len(bucket)
        ap = _maybe_ap(bucket) if bucket else None
        if ap is not None:
            report.mAP_by_face_size[name] = ap
    for count in FACE_COUNT_BUCKETS:
        bucket = by_count.get(count, [])
        report.support[f"count_{count}"] = len(bucket)
        ap = _maybe_ap(bucket) if bucket else None
        if ap is not None:
            report.mAP_by_face_count[count] = ap
    return report

# ==========================================
# 2. CSV
# ==========================================

def records_to_frame(records):
    return pd.DataFrame([asdict(r) for r in records], columns=CSV_COLUMNS)


def write_predictions_csv(path, records):
    path = Path(path)
    df = records_to_frame(records)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        df.to_csv(path, index=False, lineterminator="\n", encoding="utf-8")
    except OSError as e:
        raise DataError(f"Falha ao gravar {path}: {e}") from e
    return path


def read_predictions_csv(path):
    try:
        df = pd.read_csv(path, dtype={"scene_id": str, "entity_id": str}, encoding="utf-8")
    except (OSError, pd.errors.ParserError) as e:
        raise DataError(f"Falha ao ler {path}: {e}") from e
    missing = [c for c in CSV_COLUMNS if c not in df.columns]
    if missing:
        raise DataError(f"{path}: colunas ausentes {missing}")
    if df.duplicated(["scene_id", "frame_index", "entity_id"]).any():
        raise DataError(f"{path}: chaves (scene_id, frame_index, entity_id) repetidas")
    return [PredictionRecord(str(r.scene_id), int(r.frame_index), str(r.entity_id), float(r.score),
                             int(r.label), float(r.face_width), int(r.faces_visible))
            for r in df.itertuples(index=False)]
