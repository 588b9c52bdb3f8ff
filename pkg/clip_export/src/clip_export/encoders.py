"""Embedding backends.

Identifiers:
    stub:<dim>[:salt]    deterministic hash-keyed pseudo-embeddings (no deps)
    tiny-clip[:seed]     small randomly initialized CLIP in eval mode
                         (needs torch + transformers; offline, deterministic)
    hf-clip:<model_id>   a real pretrained CLIP checkpoint via transformers
"""
from __future__ import annotations

import logging

import numpy as np

log = logging.getLogger(__name__)

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3


def _fnv1a64(data: bytes) -> int:
    h = _FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * _FNV_PRIME) & 0xFFFFFFFFFFFFFFFF
    return h


class StubEncoder:
    """Unit vectors from a PCG64 stream keyed by the input bytes' hash."""

    def __init__(self, dim: int, salt: int = 0):
        self.dim = dim
        self.salt = salt & 0xFFFFFFFFFFFFFFFF

    def _unit(self, key: int) -> np.ndarray:
        rng = np.random.Generator(np.random.PCG64(key ^ self.salt))
        v = rng.standard_normal(self.dim)
        return (v / np.linalg.norm(v)).astype(np.float32)

    def encode_texts(self, texts: list[str]) -> np.ndarray:
        return np.stack([self._unit(_fnv1a64(t.encode("utf-8"))) for t in texts])

    def encode_images(self, paths: list[str]) -> np.ndarray:
        rows = []
        for path in paths:
            with open(path, "rb") as f:
                rows.append(self._unit(_fnv1a64(f.read())))
        return np.stack(rows)


class ClipEncoder:
    """CLIP text/image towers through transformers.

    ``model_id`` is either a hub checkpoint name or the literal "tiny",
    which builds a small randomly initialized model (seeded; useful where
    no checkpoint can be downloaded).
    """

    def __init__(self, model_id: str = "tiny", seed: int = 0, batch_size: int = 8):
        import torch
        from transformers import CLIPConfig, CLIPModel, CLIPTextConfig, \
            CLIPVisionConfig

        self._torch = torch
        self.batch_size = batch_size
        if model_id == "tiny":
            text_cfg = CLIPTextConfig(
                hidden_size=64, intermediate_size=128, num_hidden_layers=2,
                num_attention_heads=2, projection_dim=32,
                max_position_embeddings=77, vocab_size=4096,
                bos_token_id=0, eos_token_id=1, pad_token_id=2)
            vision_cfg = CLIPVisionConfig(
                hidden_size=64, intermediate_size=128, num_hidden_layers=2,
                num_attention_heads=2, projection_dim=32, image_size=32,
                patch_size=16)
            cfg = CLIPConfig(text_config=text_cfg.to_dict(),
                             vision_config=vision_cfg.to_dict(), projection_dim=32)
            torch.manual_seed(seed)
            self.model = CLIPModel(cfg).eval()
            self.processor = None
            self._tiny = True
        else:
            from transformers import CLIPProcessor

            self.model = CLIPModel.from_pretrained(model_id).eval()
            self.processor = CLIPProcessor.from_pretrained(model_id)
            self._tiny = False
        self.dim = int(self.model.config.projection_dim)

    def _to_array(self, out) -> np.ndarray:
        tensor = out if isinstance(out, self._torch.Tensor) else out.pooler_output
        return tensor.detach().cpu().numpy().astype(np.float32)

    def _tiny_tokenize(self, texts: list[str]):
        # hash words into the toy vocabulary; deterministic, no tokenizer file
        torch = self._torch
        rows = []
        for text in texts:
            ids = [0] + [3 + _fnv1a64(w.encode("utf-8")) % 4090
                         for w in text.lower().split()][:75] + [1]
            rows.append(ids)
        width = max(len(r) for r in rows)
        batch = torch.full((len(rows), width), 2, dtype=torch.long)
        mask = torch.zeros((len(rows), width), dtype=torch.long)
        for i, r in enumerate(rows):
            batch[i, :len(r)] = torch.tensor(r)
            mask[i, :len(r)] = 1
        return batch, mask

    def encode_texts(self, texts: list[str]) -> np.ndarray:
        torch = self._torch
        chunks = []
        for lo in range(0, len(texts), self.batch_size):
            part = texts[lo:lo + self.batch_size]
            with torch.no_grad():
                if self._tiny:
                    ids, mask = self._tiny_tokenize(part)
                    out = self.model.get_text_features(input_ids=ids,
                                                       attention_mask=mask)
                else:
                    enc = self.processor(text=part, return_tensors="pt",
                                         padding=True, truncation=True)
                    out = self.model.get_text_features(**enc)
            chunks.append(self._to_array(out))
        return np.concatenate(chunks, axis=0)

    def encode_images(self, paths: list[str]) -> np.ndarray:
        import torch
        from PIL import Image

        chunks = []
        for lo in range(0, len(paths), self.batch_size):
            part = paths[lo:lo + self.batch_size]
            with torch.no_grad():
                if self._tiny:
                    pixels = []
                    for p in part:
                        img = Image.open(p).convert("RGB").resize((32, 32))
                        arr = np.asarray(img, dtype=np.float32) / 255.0
                        pixels.append(arr.transpose(2, 0, 1))
                    out = self.model.get_image_features(
                        pixel_values=torch.tensor(np.stack(pixels)))
                else:
                    images = [Image.open(p).convert("RGB") for p in part]
                    enc = self.processor(images=images, return_tensors="pt")
                    out = self.model.get_image_features(**enc)
            chunks.append(self._to_array(out))
        return np.concatenate(chunks, axis=0)


def make_encoder(identifier: str, batch_size: int = 8):
    """Build an encoder from its identifier string."""
    if identifier.startswith("stub:"):
        parts = identifier.split(":")
        dim = int(parts[1])
        salt = int(parts[2]) if len(parts) > 2 else 0
        return StubEncoder(dim, salt)
    if identifier == "tiny-clip" or identifier.startswith("tiny-clip:"):
        seed = int(identifier.split(":")[1]) if ":" in identifier else 0
        return ClipEncoder("tiny", seed=seed, batch_size=batch_size)
    if identifier.startswith("hf-clip:"):
        return ClipEncoder(identifier.split(":", 1)[1], batch_size=batch_size)
    raise ValueError(f"unknown encoder identifier {identifier!r}")
