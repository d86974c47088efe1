#!/usr/bin/env python3
"""Convert an OpenAI-format CLIP checkpoint into a `glocal` backbone archive.

The Rust binary loads frozen towers from a single `GLARCH01` file
(`--backbone archive:PATH`). This script maps a ViT CLIP state dict —
e.g. ViT-L/14@336px — onto that layout. It needs `torch` plus the
`clip` package (for its BPE tokenizer) and is meant to be run once,
offline; nothing in the test suite depends on it.

    pip install torch ftfy regex git+https://github.com/openai/CLIP.git
    python scripts/convert_clip_weights.py ViT-L-14-336px.pt vit_l14_336.gar

Archive layout (all little-endian):

    magic            8 bytes  b"GLARCH01"
    meta_len         u64      length of the UTF-8 JSON metadata blob
    meta             bytes    {"logit_scale", "text": {...}, "vision": {...}}
    n_entries        u64
    per entry:
        name_len     u32      then the UTF-8 tensor name
        dtype        u8       1 = f64, 2 = f32
        ndim         u8       then ndim u64 dims
        payload      row-major floats of the stated dtype

Tensor names and orientations (linear layers act as `y = x @ W.T + b`,
so PyTorch weights copy over directly; the two joint-space projections
are applied as `x @ W` upstream and therefore transposed here):

    text.token_embedding            (vocab, width)
    text.positional_embedding       (context, width)
    text.layer.N.ln1.{weight,bias}  1-indexed layers
    text.layer.N.attn.{w_qkv,b_qkv,w_out,b_out}
    text.layer.N.ln2.{weight,bias}
    text.layer.N.mlp.{w1,b1,w2,b2}
    text.ln_final.{weight,bias}
    text.projection                 (joint, width)   <- transposed
    vision.patch_embedding          (width, 3*patch*patch), channel-major
    vision.class_token              (1, width)
    vision.positional_embedding     (1 + grid_h*grid_w, width)
    vision.ln_pre.{weight,bias}
    vision.layer.N.*                same per-layer scheme as text
    vision.ln_post.{weight,bias}
    vision.projection               (joint, width)   <- transposed
"""

import json
import struct
import sys


def eprint(*args):
    print(*args, file=sys.stderr)


try:
    import torch
except ImportError:
    eprint("this converter needs torch: pip install torch")
    raise

try:
    from clip.simple_tokenizer import SimpleTokenizer
except ImportError:
    eprint("this converter needs the clip package for its tokenizer:")
    eprint("  pip install ftfy regex git+https://github.com/openai/CLIP.git")
    raise

# Normalization constants CLIP preprocessing bakes into every tower.
IMAGE_MEAN = [0.48145466, 0.4578275, 0.40821073]
IMAGE_STD = [0.26862954, 0.26130258, 0.27577711]


class ArchiveWriter:
    def __init__(self):
        self.entries = []

    def put(self, name, tensor):
        array = tensor.detach().cpu().to(torch.float32).numpy()
        self.entries.append((name, array))

    def save(self, path, meta):
        with open(path, "wb") as f:
            f.write(b"GLARCH01")
            blob = json.dumps(meta).encode("utf-8")
            f.write(struct.pack("<Q", len(blob)))
            f.write(blob)
            f.write(struct.pack("<Q", len(self.entries)))
            for name, array in self.entries:
                encoded = name.encode("utf-8")
                f.write(struct.pack("<I", len(encoded)))
                f.write(encoded)
                f.write(bytes([2, array.ndim]))  # dtype 2 = f32
                for dim in array.shape:
                    f.write(struct.pack("<Q", dim))
                f.write(array.astype("<f4").tobytes(order="C"))


def copy_block(writer, state, src_prefix, dst_prefix, n_layers):
    for i in range(n_layers):
        src = f"{src_prefix}.resblocks.{i}"
        dst = f"{dst_prefix}.layer.{i + 1}"
        writer.put(f"{dst}.ln1.weight", state[f"{src}.ln_1.weight"])
        writer.put(f"{dst}.ln1.bias", state[f"{src}.ln_1.bias"])
        writer.put(f"{dst}.attn.w_qkv", state[f"{src}.attn.in_proj_weight"])
        writer.put(f"{dst}.attn.b_qkv", state[f"{src}.attn.in_proj_bias"])
        writer.put(f"{dst}.attn.w_out", state[f"{src}.attn.out_proj.weight"])
        writer.put(f"{dst}.attn.b_out", state[f"{src}.attn.out_proj.bias"])
        writer.put(f"{dst}.ln2.weight", state[f"{src}.ln_2.weight"])
        writer.put(f"{dst}.ln2.bias", state[f"{src}.ln_2.bias"])
        writer.put(f"{dst}.mlp.w1", state[f"{src}.mlp.c_fc.weight"])
        writer.put(f"{dst}.mlp.b1", state[f"{src}.mlp.c_fc.bias"])
        writer.put(f"{dst}.mlp.w2", state[f"{src}.mlp.c_proj.weight"])
        writer.put(f"{dst}.mlp.b2", state[f"{src}.mlp.c_proj.bias"])


def single_token(tokenizer, word):
    ids = tokenizer.encode(word)
    if len(ids) != 1:
        raise SystemExit(f"{word!r} is not a single vocabulary token: {ids}")
    return ids[0]


def main():
    if len(sys.argv) != 3:
        raise SystemExit(f"usage: {sys.argv[0]} CLIP_CHECKPOINT OUT_ARCHIVE")
    src, dst = sys.argv[1], sys.argv[2]

    loaded = torch.jit.load(src, map_location="cpu") if src.endswith(".pt") else None
    state = loaded.state_dict() if loaded is not None else torch.load(src, map_location="cpu")

    text_layers = sum(1 for k in state if k.endswith(".ln_1.weight") and not k.startswith("visual"))
    vision_layers = sum(1 for k in state if k.startswith("visual") and k.endswith(".ln_1.weight"))
    width = state["ln_final.weight"].shape[0]
    vision_width = state["visual.ln_post.weight"].shape[0]
    conv = state["visual.conv1.weight"]  # (width, 3, patch, patch)
    patch = conv.shape[-1]
    grid = int((state["visual.positional_embedding"].shape[0] - 1) ** 0.5)
    resolution = grid * patch

    writer = ArchiveWriter()
    writer.put("text.token_embedding", state["token_embedding.weight"])
    writer.put("text.positional_embedding", state["positional_embedding"])
    copy_block(writer, state, "transformer", "text", text_layers)
    writer.put("text.ln_final.weight", state["ln_final.weight"])
    writer.put("text.ln_final.bias", state["ln_final.bias"])
    writer.put("text.projection", state["text_projection"].t())

    writer.put("vision.patch_embedding", conv.reshape(conv.shape[0], -1))
    writer.put("vision.class_token", state["visual.class_embedding"].reshape(1, -1))
    writer.put("vision.positional_embedding", state["visual.positional_embedding"])
    writer.put("vision.ln_pre.weight", state["visual.ln_pre.weight"])
    writer.put("vision.ln_pre.bias", state["visual.ln_pre.bias"])
    copy_block(writer, state, "visual.transformer", "vision", vision_layers)
    writer.put("vision.ln_post.weight", state["visual.ln_post.weight"])
    writer.put("vision.ln_post.bias", state["visual.ln_post.bias"])
    writer.put("vision.projection", state["visual.proj"].t())

    tokenizer = SimpleTokenizer()
    meta = {
        # CLIP stores the log of the similarity scale.
        "logit_scale": float(state["logit_scale"].exp()),
        "text": {
            "layers": text_layers,
            "heads": width // 64,
            "word_ids": {
                "sot": tokenizer.encoder["<|startoftext|>"],
                "eot": tokenizer.encoder["<|endoftext|>"],
                "object": single_token(tokenizer, "object"),
                "damaged": single_token(tokenizer, "damaged"),
            },
            "carrier_ids": tokenizer.encode("a photo of a"),
        },
        "vision": {
            "layers": vision_layers,
            "heads": vision_width // 64,
            "patch_size": patch,
            "input_resolution": [resolution, resolution],
            "image_mean": IMAGE_MEAN,
            "image_std": IMAGE_STD,
        },
    }
    writer.save(dst, meta)
    print(
        f"wrote {dst}: text {text_layers}x{width}, "
        f"vision {vision_layers}x{vision_width} patch {patch} at {resolution}px"
    )


if __name__ == "__main__":
    main()
