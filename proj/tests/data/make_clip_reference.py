"""Regenerates toy_clip.safetensors and toy_clip_reference.json.

A toy-sized transformers.CLIPModel with random weights is exported in float64
together with its image/text features for fixed inputs. The C++ encoders must
reproduce those features after loading the file.

    python3 tests/data/make_clip_reference.py
"""

import json
import pathlib

import numpy as np
import torch
from safetensors.torch import save_file
from transformers import CLIPConfig, CLIPModel

HERE = pathlib.Path(__file__).resolve().parent
PROMPTS = ["This is an example of a real face", "a photo of a spoof face", "Print!"]


def bytes_to_unicode():
    bs = list(range(ord("!"), ord("~") + 1)) + list(range(ord("¡"), ord("¬") + 1)) + list(range(ord("®"), ord("ÿ") + 1))
    cs = bs[:]
    n = 0
    for b in range(256):
        if b not in bs:
            bs.append(b)
            cs.append(256 + n)
            n += 1
    return dict(zip(bs, map(chr, cs)))


def byte_level_ids(text):
    # Zero-merge CLIP vocabulary: 256 byte symbols, the same with </w>, then
    # <|startoftext|> and <|endoftext|>. Words split on whitespace and around
    # punctuation, which is enough for the prompts above.
    import re

    b2u = bytes_to_unicode()
    vocab = list(b2u.values())
    vocab += [v + "</w>" for v in vocab]
    vocab += ["<|startoftext|>", "<|endoftext|>"]
    enc = {v: i for i, v in enumerate(vocab)}
    ids = [enc["<|startoftext|>"]]
    for word in re.findall(r"[A-Za-z]+|[0-9]|[^\sA-Za-z0-9]+", text.lower()):
        chars = [b2u[b] for b in word.encode("utf-8")]
        chars[-1] += "</w>"
        ids += [enc[c] for c in chars]
    ids.append(enc["<|endoftext|>"])
    return ids


def main():
    torch.manual_seed(20240611)
    cfg = CLIPConfig(
        text_config=dict(vocab_size=514, hidden_size=32, intermediate_size=128, num_hidden_layers=2,
                         num_attention_heads=4, max_position_embeddings=77, hidden_act="quick_gelu",
                         bos_token_id=512, eos_token_id=513, pad_token_id=513),
        vision_config=dict(hidden_size=32, intermediate_size=128, num_hidden_layers=2, num_attention_heads=4,
                           image_size=32, patch_size=8, hidden_act="quick_gelu"),
        projection_dim=16,
    )
    model = CLIPModel(cfg).double().eval()
    # Random layer norms and biases so every tensor matters.
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name.endswith("bias") or "norm" in name or "layrnorm" in name:
                p.add_(0.1 * torch.randn_like(p))
            if name == "logit_scale":
                p.fill_(2.0)

    pixels = torch.randn(2, 3, 32, 32, dtype=torch.float64)
    token_ids = [byte_level_ids(p) for p in PROMPTS]
    with torch.no_grad():
        vis = model.vision_model(pixel_values=pixels)
        img_feat = model.visual_projection(vis.pooler_output)
        txt_feat = []
        for ids in token_ids:
            out = model.text_model(input_ids=torch.tensor([ids]))
            txt_feat.append(model.text_projection(out.pooler_output)[0])
        txt_feat = torch.stack(txt_feat)

    state = {k: v.contiguous() for k, v in model.state_dict().items()}
    save_file(state, HERE / "toy_clip.safetensors", metadata={"format": "pt"})
    ref = {
        "pixels": pixels.numpy().tolist(),
        "prompts": PROMPTS,
        "token_ids": token_ids,
        "class_token": vis.pooler_output.numpy().tolist(),
        "image_embeds": img_feat.numpy().tolist(),
        "text_embeds": txt_feat.numpy().tolist(),
        "logit_scale": float(model.logit_scale),
    }
    (HERE / "toy_clip_reference.json").write_text(json.dumps(ref))
    print("tensors:", len(state), "prompt ids:", token_ids)


if __name__ == "__main__":
    main()
