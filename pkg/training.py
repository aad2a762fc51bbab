import logging
import math
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
import pandas as pd
from tqdm import tqdm

import lscm
import tensor_core as tc
from config import config_to_text, with_overrides
from conversim import augment, sample_context
from eval_metrics import PredictionRecord, bucketed_map
from model import FeatureCache, LoCoNetModel
from utils import DataError, UndefinedMetricError, UsageError, ensure_dir, rng_for

log = logging.getLogger(__name__)

TRAIN_LOG = "train_log.csv"
TRAIN_LOG_COLUMNS = ["epoch", "lr", "train_loss", "val_mAP", "val_AUC"]
ABLATION_AXES = ("T", "S", "k", "N", "sim_kind", "use_lim", "use_sim")

# ==========================================
# 1. AMOSTRAS
# ==========================================

def build_targets(scenes):
    """Todas as (cena, entidade) do conjunto; cada entidade visível vira alvo uma vez por época."""
    return [(si, eid) for si, scene in enumerate(scenes) for eid in scene.entity_ids]


def training_sample(scene, entity_id, cfg, epoch, pool):
    sample = sample_context(scene, entity_id, cfg.S, seed=rng_key(cfg.seed, epoch))
    if sample.T > cfg.T:
        start = int(rng_for(cfg.seed, "window", epoch, scene.scene_id, entity_id).integers(0, sample.T - cfg.T + 1))
        sample = sample.window(start, cfg.T)
    return augment(sample, pool, seed=rng_key(cfg.seed, epoch), visual=cfg.aug_visual, audio=cfg.aug_audio)


def rng_key(seed, *keys):
    return int(rng_for(seed, *keys).integers(0, 2 ** 31 - 1))


def eval_windows(n_frames, T):
    """Janelas consecutivas [a, b) de até T frames cobrindo a cena."""
    return [(a, min(a + T, n_frames)) for a in range(0, n_frames, T)]

# ==========================================
# 2. PASSO DE TREINO
# ==========================================

def first_nonfinite(graph):
    for i, node in enumerate(graph.nodes):
        if not np.all(np.isfinite(node.output.data)):
            return i, node.op, node.output.shape
    return None


def batch_loss(model, samples):
    """Soma das perdas Σᵢ CE das amostras dividida pelo tamanho do lote."""
    total = None
    for sample in samples:
        _, logits = model(sample)
        value = lscm.loss(logits, sample.R)
        total = value if total is None else total + value
    return total * (1.0 / len(samples))


def train_step(model, optimizer, samples):
    optimizer.zero_grad()
    with tc.Graph() as graph:
        loss = batch_loss(model, samples)
    value = loss.item()
    if not math.isfinite(value):
        where = first_nonfinite(graph)
        detail = f"nó #{where[0]} ({where[1]}, forma {where[2]})" if where else "entrada"
        raise DataError(f"perda não finita ({value}); primeiro tensor não finito: {detail}")
    graph.backward(loss)
    optimizer.step()
    return value

# ==========================================
# 3. AVALIAÇÃO
# ==========================================

def predict_scene(model, scene, cfg, reuse=True):
    """
    Cada entidade como alvo; janelas de cfg.T frames. Devolve lista de PredictionRecord.
    Frames em que o alvo está fora de quadro não geram registro.
    """
    cache = FeatureCache() if reuse else None
    records = []
    visible = scene.faces_visible
    for eid, width in zip(scene.entity_ids, scene.face_widths):
        full = sample_context(scene, eid, cfg.S, seed=cfg.seed)
        on_screen = scene.entity_on_screen(eid)
        for a, b in eval_windows(full.T, cfg.T):
            sample = full.window(a, b - a)
            scores, _ = model.predict_scores(sample, cache)
            for t, score in enumerate(scores):
                if not on_screen[a + t]:
                    continue
                records.append(PredictionRecord(scene.scene_id, a + t, eid, float(score), int(sample.R[t]),
                                                float(width), int(visible[a + t])))
    return records


def evaluate(model, scenes, cfg, workers=1, quiet=True):
    """Inferência em todas as cenas (threads por cena), resultado ordenado por scene_id."""
    scenes = sorted(scenes, key=lambda s: s.scene_id)
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        parts = list(tqdm(pool.map(lambda s: predict_scene(model, s, cfg), scenes),
                          total=len(scenes), desc="Avaliando", disable=quiet))
    return [r for part in parts for r in part]


def report_or_none(records):
    try:
        return bucketed_map(records)
    except UndefinedMetricError as e:
        log.warning("⚠️ mAP indefinida na validação: %s", e)
        return None

# ==========================================
# 4. LAÇO DE TREINO
# ==========================================

def train(cfg, train_scenes, val_scenes, out_dir, quiet=False, checkpoint=None):
    """
    Adam ponta a ponta; lr *= decay a cada época. A linha epoch=0 do log traz a perda
    do primeiro lote antes de qualquer atualização e o mAP do modelo sem treino.
    Devolve (modelo treinado, DataFrame do histórico).
    """
    if not train_scenes:
        raise DataError("conjunto de treino vazio")
    out_dir = ensure_dir(out_dir)
    checkpoint = Path(checkpoint) if checkpoint else out_dir / "loconet.lcnt"
    model = LoCoNetModel(cfg)
    optimizer = tc.Adam(model.parameters(), cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps, decay=cfg.decay)
    pool = [(s.scene_id, s.waveform) for s in train_scenes]
    targets = build_targets(train_scenes)

    def batches(epoch):
        order = rng_for(cfg.seed, "shuffle", epoch).permutation(len(targets))
        for i in range(0, len(order), cfg.batch_size):
            yield [training_sample(train_scenes[targets[j][0]], targets[j][1], cfg, epoch, pool)
                   for j in order[i:i + cfg.batch_size]]

    history = []
    first = next(batches(0))
    initial = batch_loss(model, first).item()
    val = report_or_none(evaluate(model, val_scenes, cfg, cfg.workers)) if val_scenes else None
    history.append(_row(0, optimizer.lr, initial, val))
    log.info("Época 0: perda inicial %.4f (N·ln2 = %.4f)", initial, max(cfg.N, 1) * math.log(2))

    best = -1.0
    for epoch in range(1, cfg.epochs + 1):
        losses = [train_step(model, optimizer, batch)
                  for batch in tqdm(list(batches(epoch)), desc=f"Época {epoch}", disable=quiet)]
        train_loss = float(np.mean(losses))
        val = report_or_none(evaluate(model, val_scenes, cfg, cfg.workers)) if val_scenes else None
        history.append(_row(epoch, optimizer.lr, train_loss, val))
        score = val.mAP if val is not None else -train_loss
        log.info("Época %d: perda %.4f | val mAP %s | lr %.2e", epoch, train_loss,
                 f"{val.mAP:.4f}" if val else "-", optimizer.lr)
        if score > best:
            best = score
            model.save(checkpoint)
            log.info("✅ Checkpoint salvo em %s", checkpoint)
        optimizer.end_epoch()

    log_df = pd.DataFrame(history, columns=TRAIN_LOG_COLUMNS)
    log_df.to_csv(out_dir / TRAIN_LOG, index=False, lineterminator="\n")
    (out_dir / "config.txt").write_text(config_to_text(cfg), encoding="utf-8")
    return model, log_df


def _row(epoch, lr, loss, report):
    return {"epoch": epoch, "lr": lr, "train_loss": loss,
            "val_mAP": report.mAP if report else float("nan"),
            "val_AUC": report.AUC if report else float("nan")}

# ==========================================
# 5. ABLAÇÃO E CUSTO
# ==========================================

def ablation_config(cfg, axis, value, seed):
    if axis not in ABLATION_AXES:
        raise UsageError(f"eixo de ablação desconhecido: {axis} (opções: {', '.join(ABLATION_AXES)})")
    changes = {axis: value, "seed": seed}
    if axis == "S":
        changes["s"] = min(cfg.s, int(value))
    return with_overrides(cfg, **changes)


def run_ablation(cfg, axis, values, train_scenes, val_scenes, out_dir, quiet=True):
    """Um treino + avaliação por valor (e por seed); mAP médio, baldes e custo por crop."""
    rows = []
    for value in values:
        reports = []
        for i in range(cfg.ablation_seeds):
            run_cfg = ablation_config(cfg, axis, value, cfg.seed + i)
            run_dir = Path(out_dir) / f"{axis}_{value}_seed{run_cfg.seed}"
            model, _ = train(run_cfg, train_scenes, val_scenes, run_dir, quiet=quiet,
                             checkpoint=run_dir / "loconet.lcnt")
            reports.append(bucketed_map(evaluate(model, val_scenes, run_cfg, cfg.workers)))
        flops = estimate_flops(run_cfg)
        row = {"axis": axis, "value": value, "seeds": cfg.ablation_seeds,
               "mAP": float(np.mean([r.mAP for r in reports])),
               "AUC": float(np.nanmean([r.AUC for r in reports])),
               "GFLOPs_per_crop": flops["per_crop"] * 2 / 1e9}
        for name in ("small", "medium", "large"):
            vals = [r.mAP_by_face_size[name] for r in reports if name in r.mAP_by_face_size]
            row[f"mAP_{name}"] = float(np.mean(vals)) if vals else float("nan")
        for count in (1, 2, 3):
            vals = [r.mAP_by_face_count[count] for r in reports if count in r.mAP_by_face_count]
            row[f"mAP_faces_{count}"] = float(np.mean(vals)) if vals else float("nan")
        log.info("Ablação %s=%s: mAP %.4f", axis, value, row["mAP"])
        rows.append(row)
    return pd.DataFrame(rows)


def _conv_macs(out_positions, c_in, c_out, kernel):
    return out_positions * c_in * c_out * int(np.prod(kernel))


def estimate_flops(cfg):
    """
    Multiplicações-acumulações por amostra (S trilhas, T frames) e por face/frame predito.
    Contagem analítica das camadas densas; ativações e normalizações ignoradas.
    """
    T, S, C, H = cfg.T, cfg.S, cfg.C, cfg.crop
    widths = list(cfg.visual_widths) + [C]
    h = -(-H // 2)
    visual = _conv_macs(T * h * h, 1, widths[0], (5, 3, 3))
    c_in = widths[0]
    for c_out in widths:
        h = -(-h // 2)
        visual += _conv_macs(T * h * h, c_in, c_out, (3, 3)) + _conv_macs(T * h * h, c_out, c_out, (3, 3))
        visual += _conv_macs(T * h * h, c_in, c_out, (1, 1))
        c_in = c_out
    visual += cfg.tcn_blocks * T * (3 * C + C * C)

    aw = list(cfg.audio_widths)
    rows, freq, audio, c_in = 4 * T, cfg.mel_bins, 0, 1
    for i, c_out in enumerate(aw):
        audio += _conv_macs(rows * freq, c_in, c_out, (3, 3))
        if i == 2:
            tap = (rows, freq, c_out)
        if i < 3:
            rows, freq = -(-rows // 2), -(-freq // 2)
        c_in = c_out
    audio += rows * freq * aw[3] * aw[3] * 2
    audio += T * (tap[1] * tap[2] + freq * aw[3]) * C

    hidden = cfg.mlp_ratio * C
    lim = 0
    if cfg.use_lim:
        per_layer = S * (4 * T * C * C + 2 * T * T * C + 2 * T * C * hidden)
        lim = 4 * per_layer
    sim = 0
    if cfg.use_sim:
        if cfg.sim_kind == "convolution":
            sim = 2 * (S * T * C * C * cfg.s * cfg.k + 2 * S * T * C * hidden)
        else:
            tokens = cfg.s * cfg.k
            sim = 2 * (S * T * (4 * C * C + 2 * tokens * C) + 2 * S * T * C * hidden)
    head = cfg.N * T * 2 * C * 2
    total = S * visual + audio + cfg.N * (lim + sim) + head
    return {"visual_per_track": visual, "audio": audio, "lim_per_block": lim, "sim_per_block": sim,
            "head": head, "total": total, "per_crop": total / T}
