import logging
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
from tqdm import tqdm

import tensor_core as tc
from audio_frontend import read_wav, write_wav
from conversim import Scene, SceneSpec, generate_scene
from utils import DataError, dump_json, ensure_dir, load_json

log = logging.getLogger(__name__)

SCENE_JSON = "scene.json"
AUDIO_WAV = "audio.wav"
TRACKS_BIN = "tracks.bin"
MANIFEST = "manifest.json"

# ==========================================
# 1. UMA CENA POR DIRETÓRIO
# ==========================================

def write_scene(directory, scene):
    directory = ensure_dir(directory)
    payload = {
        "scene_id": scene.scene_id,
        "spec": scene.spec.to_dict(),
        "labels": scene.labels.astype(int).tolist(),
        "overlap": scene.overlap.astype(int).tolist(),
        "entity_ids": list(scene.entity_ids),
        "person_ids": [int(p) for p in scene.person_ids],
        "face_widths": [int(w) for w in scene.face_widths],
        "face_sizes": list(scene.face_sizes),
        "carriers_hz": [float(c) for c in scene.carriers_hz],
        "mouth_open": np.round(scene.mouth_open, 6).tolist(),
        "on_screen": scene.visibility.astype(int).tolist(),
    }
    dump_json(directory / SCENE_JSON, payload)
    write_wav(directory / AUDIO_WAV, scene.waveform)
    tc.save_checkpoint(directory / TRACKS_BIN, {"V": scene.tracks})
    return directory


def read_scene(directory):
    directory = Path(directory)
    meta = load_json(directory / SCENE_JSON)
    try:
        tracks = tc.load_checkpoint(directory / TRACKS_BIN)["V"].astype(np.float32)
    except KeyError:
        raise DataError(f"{directory / TRACKS_BIN}: tensor V ausente") from None
    try:
        return Scene(
            scene_id=meta["scene_id"], spec=SceneSpec.from_dict(meta["spec"]), tracks=tracks,
            entity_ids=meta["entity_ids"], person_ids=meta["person_ids"],
            labels=np.asarray(meta["labels"], dtype=np.int64), waveform=read_wav(directory / AUDIO_WAV),
            face_widths=meta["face_widths"], face_sizes=meta["face_sizes"], carriers_hz=meta["carriers_hz"],
            mouth_open=np.asarray(meta["mouth_open"]), overlap=np.asarray(meta["overlap"], dtype=bool),
            on_screen=np.asarray(meta["on_screen"], dtype=bool) if "on_screen" in meta else None,
        )
    except (KeyError, TypeError) as e:
        raise DataError(f"{directory / SCENE_JSON}: campo ausente ou inválido ({e})") from e

# ==========================================
# 2. MANIFESTO
# ==========================================

def speaking_fraction(labels_rows):
    rows = [np.asarray(r) for r in labels_rows]
    frames = sum(r.size for r in rows)
    return float(sum(r.sum() for r in rows) / frames) if frames else 0.0


def scene_entry(scene, split, path):
    visible = scene.labels[scene.person_ids]
    return {
        "scene_id": scene.scene_id,
        "split": split,
        "path": str(path),
        "num_people": int(scene.labels.shape[0]),
        "num_entities": len(scene.entity_ids),
        "frames": int(scene.T),
        "positives": int(visible.sum()),
        "speaking_fraction": speaking_fraction(visible),
    }


def write_manifest(out, entries, seed=None):
    stats = {}
    for split in sorted({e["split"] for e in entries}):
        rows = [e for e in entries if e["split"] == split]
        total = sum(e["num_entities"] * e["frames"] for e in rows)
        stats[split] = {
            "scenes": len(rows),
            "entities": sum(e["num_entities"] for e in rows),
            "speaking_fraction": sum(e["positives"] for e in rows) / total if total else 0.0,
        }
    return dump_json(Path(out) / MANIFEST, {"seed": seed, "scenes": entries, "stats": stats})


def read_manifest(dataset):
    path = Path(dataset) / MANIFEST
    if not path.exists():
        raise DataError(f"dataset sem manifesto: {path}")
    return load_json(path)


def read_split(dataset, split):
    manifest = read_manifest(dataset)
    rows = [e for e in manifest["scenes"] if e["split"] == split]
    return [read_scene(Path(dataset) / e["path"]) for e in rows]

# ==========================================
# 3. GERAÇÃO EM PARALELO
# ==========================================

def write_dataset(out, specs, workers=4, seed=None, quiet=False):
    """
    specs: lista de (split, SceneSpec). Geração em threads; o manifesto sai
    ordenado por scene_id, independente da ordem de conclusão.
    """
    out = ensure_dir(out)

    def job(item):
        split, spec = item
        scene = generate_scene(spec)
        rel = Path(split) / scene.scene_id
        write_scene(out / rel, scene)
        return scene_entry(scene, split, rel.as_posix())

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        entries = list(tqdm(pool.map(job, specs), total=len(specs), desc="Gerando cenas", disable=quiet))
    entries.sort(key=lambda e: e["scene_id"])
    write_manifest(out, entries, seed=seed)
    log.info("✅ %d cenas gravadas em %s", len(entries), out)
    return entries
