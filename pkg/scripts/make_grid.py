"""Write experiments/*.cfg: every architecture x masking x CTC mode x task combination.

Usage: python3 scripts/make_grid.py [--out experiments]
"""
from __future__ import annotations

import argparse
from pathlib import Path

from s2tlab import config as C
from s2tlab.models import desk_config

TASKS = ("asr", "st_bilingual", "st_multilingual", "st_bilingual_kd")
VARIANTS = {
    "cross_attention": [("audio_causal", c) for c in ("off", "aux", "aux_with_compression")],
    "decoder_prepend": [(m, c) for m in ("audio_causal", "audio_relaxed") for c in ("off", "aux", "aux_with_compression")],
    "decoder_only": [(m, c) for m in ("audio_causal", "audio_relaxed") for c in ("off", "aux")],
}
MODEL_KEYS = ("arch", "encoder_kind", "enc_layers", "dec_layers", "d_model", "d_ffn", "heads", "masking", "ctc",
              "text_positions")
# seqKD runs train teacher and students on bilingual data whose training targets use the
# alternative reordering this often, so that distillation has a target distribution to simplify
KD_VARIANT_PROB = 0.3


def grid():
    for task in TASKS:
        for arch, variants in VARIANTS.items():
            for masking, ctc in variants:
                name = f"{task}__{arch}__{masking}__ctc-{ctc}"
                yield name, task, desk_config(arch, masking=masking, ctc=ctc)


def render(task: str, model) -> str:
    data_task = "st_bilingual" if task.endswith("_kd") else task
    cfg = C.ExperimentConfig()
    cfg.model = model
    cfg.data.task = data_task
    errs = cfg.errors()
    if errs:
        raise C.ConfigError(errs)
    kd = task.endswith("_kd")
    lines = [f"# data: gen-data --task {data_task}" + (" (teacher on the same data, then distill: Original+seqKD)" if kd else ""),
             f"data.task = {data_task}"]
    if kd:
        lines.append(f"data.target_variant_prob = {KD_VARIANT_PROB}")
    lines += [f"model.{k} = {C.format_value(getattr(model, k))}" for k in MODEL_KEYS]
    return "\n".join(lines) + "\n"


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default=str(Path(__file__).resolve().parent.parent / "experiments"))
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    n = 0
    for name, task, model in grid():
        (out / f"{name}.cfg").write_text(render(task, model))
        n += 1
    print(f"wrote {n} configs to {out}")


if __name__ == "__main__":
    main()
