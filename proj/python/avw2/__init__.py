"""Desk-scale audio-visual multichannel masked contrastive pretraining."""

import json as _json

from ._core import (
    SAMPLES_PER_FRAME,
    VOCAB_SIZE,
    Clip,
    Error,
    Finetuner,
    Pretrainer,
    beamform_clip,
    cer,
    ctc_loss,
    delay_and_sum,
    edit_distance,
    estimate_tdoa,
    gen_clip,
    gen_corpus,
    greedy_decode,
    info_nce,
    num_frames,
    read_corpus,
    run_cli,
    write_corpus,
)


def _flatten(prefix, value, out):
    if isinstance(value, dict):
        for k, v in value.items():
            _flatten(f"{prefix}.{k}" if prefix else k, v, out)
    else:
        out[prefix] = value
    return out


def pretrainer(clips, config=None, audio_clips=()):
    """Pretrainer with nested config overrides, e.g. {"loss": {"temperature": 0.05}}."""
    return Pretrainer(clips, _json.dumps(_flatten("", config or {}, {})), list(audio_clips))


def finetuner(clips, config=None, init=""):
    return Finetuner(clips, _json.dumps(_flatten("", config or {}, {})), init)


__all__ = [name for name in dir() if not name.startswith("_")]
