import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from xadapter.adapter import AdapterConfig, adapter_forward, init_adapter
from xadapter.errors import ContractViolation
from xadapter.numerics import Tensor
from xadapter.textfeat import (BankBackedProvider, HashStubProvider,
                               assemble_text_features, chunk_tokens, fnv1a64)


class TestChunkTokens:
    def test_160_ids(self):
        chunks = chunk_tokens(list(range(160)))
        assert [len(c) for c in chunks] == [77, 77, 6]

    def test_exact_boundary(self):
        assert [len(c) for c in chunk_tokens(list(range(77)))] == [77]

    def test_empty(self):
        assert chunk_tokens([]) == []

    def test_bad_limit(self):
        with pytest.raises(ContractViolation):
            chunk_tokens([1, 2, 3], limit=0)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(0, 2 ** 16), max_size=500),
       st.integers(1, 100))
def test_chunking_is_lossless(ids, limit):
    chunks = chunk_tokens(ids, limit)
    assert [t for chunk in chunks for t in chunk] == ids
    assert all(len(c) == limit for c in chunks[:-1])


class TestHashStubProvider:
    def test_outputs_are_unit_vectors(self):
        p = HashStubProvider(dim=12)
        for text in ("alpha", "beta", ""):
            v = p.embed_query(text or "x")
            assert np.linalg.norm(v) == pytest.approx(1.0, abs=1e-12)

    def test_determinism_bitwise(self):
        a = HashStubProvider(dim=8).embed_chunk([1, 2, 3])
        b = HashStubProvider(dim=8).embed_chunk([1, 2, 3])
        assert np.array_equal(a, b)

    def test_salt_changes_embeddings(self):
        a = HashStubProvider(dim=8, salt=0).embed_query("text")
        b = HashStubProvider(dim=8, salt=1).embed_query("text")
        assert not np.allclose(a, b)

    def test_fnv_reference_values(self):
        # classic FNV-1a test vectors
        assert fnv1a64(b"") == 0xCBF29CE484222325
        assert fnv1a64(b"a") == 0xAF63DC4C8601EC8C
        assert fnv1a64(b"foobar") == 0x85944171F73967E8

    def test_tokenize_text_stable(self):
        p = HashStubProvider(dim=4)
        assert p.tokenize_text("A red bus!") == p.tokenize_text("a red bus!")


class TestAssemble:
    provider = HashStubProvider(dim=5)

    def test_single_chunk_padding(self):
        out = assemble_text_features("three word text", self.provider, length=8)
        assert out.features.shape == (8, 5)
        assert out.valid_len == 1
        assert np.all(out.features[1:] == 0.0)
        assert np.any(out.features[0] != 0.0)

    def test_empty_text_rejected(self):
        with pytest.raises(ContractViolation):
            assemble_text_features("", self.provider, length=4)

    def test_two_chunks_match_manual_stack(self):
        words = " ".join(f"w{i}" for i in range(100))
        out = assemble_text_features(words, self.provider, length=4, limit=77)
        ids = self.provider.tokenize_text(words)
        manual0 = self.provider.embed_chunk(ids[:77])
        manual1 = self.provider.embed_chunk(ids[77:])
        assert np.array_equal(out.features[0], manual0)
        assert np.array_equal(out.features[1], manual1)
        assert out.valid_len == 2

    def test_truncation_flagged_and_chunks_preserved(self):
        words = " ".join(f"w{i}" for i in range(300))
        out = assemble_text_features(words, self.provider, length=2, limit=77)
        assert out.truncated
        assert out.valid_len == 2
        ids = self.provider.tokenize_text(words)
        assert [t for c in out.chunks for t in c] == ids  # all chunks retained

    def test_feature_matrix_masks_pads(self):
        out = assemble_text_features("short text", self.provider, length=6)
        fm = out.to_feature_matrix()
        assert fm.valid_len == 1
        assert fm.source == "T"

        cfg = AdapterConfig(d=8, r=8, n=2, ffn_dim=12, d_c=5)
        layer = init_adapter(cfg, seed=0)
        rng = np.random.default_rng(1)
        for _, p in layer.named_parameters():
            p.data = 0.3 * rng.standard_normal(p.data.shape) if p.data.ndim else \
                np.asarray(0.5)
        x = Tensor(rng.standard_normal((3, 8)))
        clean = adapter_forward(layer, x, fm)
        poisoned = out.features.copy()
        poisoned[1:] = 4e5
        from xadapter.adapter import FeatureMatrix

        dirty = adapter_forward(layer, x, FeatureMatrix(rows=poisoned, valid_len=1,
                                                        source="T"))
        assert np.abs(clean.data - dirty.data).max() < 1e-10


def test_bank_backed_provider_serves_exact_ids():
    from xadapter.retrieval import bank_build

    rng = np.random.default_rng(0)
    bank = bank_build([("the caption", rng.standard_normal(6)),
                       ("another", rng.standard_normal(6))], 6)
    provider = BankBackedProvider(bank)
    assert np.array_equal(provider.embed_query("the caption"), bank.normalized[0])
    fallback = provider.embed_query("unseen text")
    assert np.linalg.norm(fallback) == pytest.approx(1.0, abs=1e-12)
