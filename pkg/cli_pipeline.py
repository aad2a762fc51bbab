import argparse
import logging
import sys
from pathlib import Path

import pandas as pd

from config import load_config
from conversim import sample_context, spec_from_config
from dataset import read_scene, read_split, write_dataset
from eval_metrics import bucketed_map, write_predictions_csv
from model import FeatureCache, load_model
from training import ABLATION_AXES, evaluate, run_ablation, train
from utils import (LoconetError, UsageError,
                   dump_json, ensure_dir, setup_logging)

log = logging.getLogger(__name__)

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2

# ==========================================
# 1. SUBCOMANDOS
# ==========================================

def cmd_generate(cfg, hard_split=False, quiet=False):
    """n_train + n_val cenas no formato de dump, com manifesto."""
    hard = hard_split or cfg.hard_split
    specs = [("train", spec_from_config(cfg, i, "train", hard)) for i in range(cfg.n_train)]
    specs += [("val", spec_from_config(cfg, i, "val", hard)) for i in range(cfg.n_val)]
    return write_dataset(cfg.dataset, specs, workers=cfg.workers, seed=cfg.seed, quiet=quiet)


def cmd_train(cfg, quiet=False):
    train_scenes = read_split(cfg.dataset, "train")
    val_scenes = read_split(cfg.dataset, "val")
    log.info("Treino: %d cenas | validação: %d cenas", len(train_scenes), len(val_scenes))
    _, history = train(cfg, train_scenes, val_scenes, cfg.out, quiet=quiet, checkpoint=cfg.checkpoint)
    return Path(cfg.checkpoint), history


def cmd_eval(cfg, checkpoint=None, split="val", quiet=False):
    """Predições de todas as entidades -> predictions.csv + report.json/.txt em --out."""
    model = load_model(checkpoint or cfg.checkpoint, cfg)
    scenes = read_split(cfg.dataset, split)
    records = evaluate(model, scenes, model.cfg, workers=cfg.workers, quiet=quiet)
    report = bucketed_map(records)
    out = ensure_dir(cfg.out)
    write_predictions_csv(out / "predictions.csv", records)
    dump_json(out / "report.json", report.to_dict())
    (out / "report.txt").write_text(report.to_text() + "\n", encoding="utf-8")
    log.info("Avaliação:\n%s", report.to_text())
    return report, records


def cmd_infer(cfg, scene_dir, checkpoint=None, reuse_features=False):
    """Logits por entidade (cada uma como alvo); conta invocações do encoder visual."""
    model = load_model(checkpoint or cfg.checkpoint, cfg)
    scene = read_scene(scene_dir)
    cache = FeatureCache() if reuse_features else None
    logits = {}
    for eid in scene.entity_ids:
        sample = sample_context(scene, eid, model.cfg.S, seed=model.cfg.seed)
        _, final = model.predict_scores(sample, cache)
        logits[eid] = final
    log.info("Invocações do encoder visual: %d (reuso %s)", model.encoder_calls,
             "ligado" if reuse_features else "desligado")
    out = ensure_dir(cfg.out)
    rows = [{"entity_id": eid, "frame_index": t, "logit_0": float(l[t, 0]), "logit_1": float(l[t, 1])}
            for eid, l in logits.items() for t in range(l.shape[0])]
    pd.DataFrame(rows).to_csv(out / f"logits_{scene.scene_id}.csv", index=False, lineterminator="\n")
    return logits, model.encoder_calls


def cmd_ablate(cfg, axis, values, quiet=False):
    if axis not in ABLATION_AXES:
        raise UsageError(f"eixo de ablação desconhecido: {axis} (opções: {', '.join(ABLATION_AXES)})")
    if not values:
        raise UsageError("ablate precisa de pelo menos um valor")
    train_scenes = read_split(cfg.dataset, "train")
    val_scenes = read_split(cfg.dataset, "val")
    out = ensure_dir(cfg.out)
    table = run_ablation(cfg, axis, values, train_scenes, val_scenes, out / "ablation_runs", quiet=quiet)
    path = out / f"ablation_{axis}.csv"
    table.to_csv(path, index=False, lineterminator="\n")
    log.info("✅ Tabela de ablação em %s", path)
    return table

# ==========================================
# 2. ARGPARSE
# ==========================================

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser():
    common = _Parser(add_help=False)
    common.add_argument("--config", help="arquivo key=value")
    common.add_argument("--seed", type=int)
    common.add_argument("--out")
    common.add_argument("--dataset")
    common.add_argument("--checkpoint")
    common.add_argument("--quiet", action="store_true", help="sem barras de progresso")
    common.add_argument("--log-level", default="INFO")

    parser = _Parser(prog="loconet", description="Detecção de falante ativo com contexto longo-curto")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    g = sub.add_parser("generate", parents=[common], help="gera o conjunto sintético")
    g.add_argument("--hard-split", action="store_true")
    sub.add_parser("train", parents=[common], help="treina e grava o melhor checkpoint")
    e = sub.add_parser("eval", parents=[common], help="avalia um checkpoint")
    e.add_argument("--split", default="val")
    i = sub.add_parser("infer", parents=[common], help="logits por entidade de uma cena")
    i.add_argument("scene", help="diretório da cena")
    i.add_argument("--reuse-features", action="store_true")
    a = sub.add_parser("ablate", parents=[common], help="varredura de um eixo")
    a.add_argument("--axis", required=True)
    a.add_argument("--values", required=True, help="lista separada por vírgula")
    return parser


def run(args):
    overrides = {"seed": args.seed, "out": args.out, "dataset": args.dataset, "checkpoint": args.checkpoint}
    cfg = load_config(args.config, overrides)
    if args.command == "generate":
        cmd_generate(cfg, hard_split=args.hard_split, quiet=args.quiet)
    elif args.command == "train":
        cmd_train(cfg, quiet=args.quiet)
    elif args.command == "eval":
        cmd_eval(cfg, split=args.split, quiet=args.quiet)
    elif args.command == "infer":
        cmd_infer(cfg, args.scene, reuse_features=args.reuse_features)
    elif args.command == "ablate":
        cmd_ablate(cfg, args.axis, [v.strip() for v in args.values.split(",") if v.strip()], quiet=args.quiet)


def main(argv=None):
    """Códigos de saída: 0 sucesso, 1 uso, 2 erro de dados/forma/checkpoint/config."""
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        print(f"erro de uso: {e}", file=sys.stderr)
        return EXIT_USAGE
    setup_logging(args.log_level.upper())
    try:
        run(args)
    except UsageError as e:
        log.error("❌ %s", e)
        return EXIT_USAGE
    except LoconetError as e:
        log.error("❌ %s", e)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
