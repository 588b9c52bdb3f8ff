import numpy as np
import pytest

from xadapter.adapter import AdapterConfig, FeatureMatrix, V_EXPERT, \
    make_insertion_plan
from xadapter.encoder import EncoderConfig, EncoderModel, encode, mlm_logits
from xadapter.errors import ContractViolation, TemplateError
from xadapter.reasoning import (COLOR_LABELS, COLOR_PROMPTS, LabelSet,
                                PromptTemplate, builtin_color_pack, load_labels,
                                load_prompt_pack, mask_logits, render_prompt,
                                stack_paired_features, zero_shot_classify)
from xadapter.vocab import Vocabulary, build_model_input


@pytest.fixture()
def model():
    words = list(COLOR_LABELS) + ["q", ":", "what", "is", "the", "color",
                                  "colour", "of", "?", "a", "it", ".", "usual",
                                  "usually", "typical", "has", "banana", "grass",
                                  "fire", "truck"]
    vocab = Vocabulary(words)
    cfg = EncoderConfig(d=16, n_layers=2, n_heads=2, ffn_dim=24,
                        vocab_size=len(vocab), max_seq_len=32)
    m = EncoderModel(cfg, vocab, seed=0)
    m.freeze()
    return m


class TestPromptTemplates:
    def test_pack_has_nine_templates_and_eleven_labels(self):
        assert len(COLOR_PROMPTS) == 9
        assert len(COLOR_LABELS) == 11
        assert set(COLOR_LABELS) == {"blue", "white", "red", "yellow", "black",
                                     "green", "purple", "brown", "pink", "grey",
                                     "orange"}

    def test_render_first_template(self):
        text, _ = render_prompt(PromptTemplate(COLOR_PROMPTS[0]), "banana")
        assert text == "Q: What is the color of banana? A: It is [MASK]."

    def test_render_fifth_template(self):
        text, _ = render_prompt(PromptTemplate(COLOR_PROMPTS[4]), "grass")
        assert text == "The color of grass is [MASK]."

    def test_multi_word_item(self):
        text, pos = render_prompt(PromptTemplate("The color of [ITEM] is [MASK]."),
                                  "fire truck")
        assert "fire truck" in text
        from xadapter.vocab import split_text

        assert split_text(text)[pos] == "[MASK]"

    def test_template_requires_both_slots(self):
        with pytest.raises(TemplateError):
            PromptTemplate("No slots here.")
        with pytest.raises(TemplateError):
            PromptTemplate("[ITEM] but no mask")
        with pytest.raises(TemplateError):
            PromptTemplate("[ITEM] [MASK] [MASK]")

    def test_empty_item_rejected(self):
        with pytest.raises(ContractViolation):
            render_prompt(PromptTemplate("[ITEM] is [MASK]."), "")

    def test_prompt_pack_file_round_trip(self, tmp_path):
        path = tmp_path / "pack.txt"
        path.write_text("# comment\n[ITEM] is [MASK].\n\nThe [ITEM]? [MASK].\n")
        pack = load_prompt_pack(str(path))
        assert [t.text for t in pack] == ["[ITEM] is [MASK].", "The [ITEM]? [MASK]."]

    def test_label_file(self, tmp_path):
        path = tmp_path / "labels.txt"
        path.write_text("red\nblue\n")
        assert load_labels(str(path)) == ["red", "blue"]


class TestLabelSet:
    def test_out_of_vocab_label_named(self, model):
        with pytest.raises(ContractViolation, match="chartreuse"):
            LabelSet(["red", "chartreuse"], model.vocab)

    def test_ids_align_with_labels(self, model):
        ls = LabelSet(["red", "blue"], model.vocab)
        assert ls.ids == (model.vocab.id_of("red"), model.vocab.id_of("blue"))


class TestMaskLogits:
    def test_shape_is_label_count(self, model):
        ls = LabelSet(list(COLOR_LABELS), model.vocab)
        seq = build_model_input(model.vocab, "the color of banana is [MASK] .")
        out = mask_logits(model, None, seq, None, ls)
        assert out.shape == (11,)

    def test_slice_matches_direct_indexing(self, model):
        ls = LabelSet(list(COLOR_LABELS), model.vocab)
        seq = build_model_input(model.vocab, "it is [MASK] .")
        restricted = mask_logits(model, None, seq, None, ls)
        full = mlm_logits(model, encode(model, seq)).data
        pos = seq.ids.index(model.vocab.mask_id)
        assert np.array_equal(restricted, full[pos][list(ls.ids)])

    def test_zero_or_multiple_masks_rejected(self, model):
        ls = LabelSet(["red"], model.vocab)
        with pytest.raises(ContractViolation):
            mask_logits(model, None, build_model_input(model.vocab, "no mask"),
                        None, ls)
        with pytest.raises(ContractViolation):
            mask_logits(model, None,
                        build_model_input(model.vocab, "[MASK] and [MASK]"),
                        None, ls)

    def test_scale_zero_adapter_matches_ln_hook_baseline(self, model):
        """With s=0 the adapter plan yields the plain-with-LN-hook logits."""
        import xadapter.numerics as nm

        acfg = AdapterConfig(d=16, r=8, n=2, ffn_dim=16, d_c=4)
        plan = make_insertion_plan([2], V_EXPERT, acfg, n_layers=2, seed=1)
        layer = plan.adapters[2]
        layer.scale.data = np.asarray(0.0)
        ls = LabelSet(list(COLOR_LABELS), model.vocab)
        seq = build_model_input(model.vocab, "the banana is [MASK] .")
        feats = FeatureMatrix(rows=np.random.default_rng(0).standard_normal((3, 4)))
        with_adapter = mask_logits(model, plan, seq, feats, ls)

        h = nm.add(nm.add(nm.gather_rows(model.tok_emb, seq.ids),
                          nm.gather_rows(model.pos_emb, list(range(len(seq))))),
                   nm.gather_rows(model.type_emb, seq.token_type_ids))
        h = model.emb_ln(h)
        h = model.layers[0](h, None, None)
        h = nm.layer_norm(h, layer.ln_out.gamma, layer.ln_out.beta, acfg.ln_eps)
        h = model.layers[1](h, None, None)
        full = mlm_logits(model, h).data
        pos = seq.ids.index(model.vocab.mask_id)
        assert np.abs(with_adapter - full[pos][list(ls.ids)]).max() < 1e-12


class TestZeroShot:
    def test_single_template_is_identity_aggregation(self, model):
        ls = LabelSet(list(COLOR_LABELS), model.vocab)
        t = [PromptTemplate(COLOR_PROMPTS[4])]
        result = zero_shot_classify(model, None, "banana", t, ls, None)
        assert np.array_equal(result.scores, result.per_template_scores[0])
        assert result.per_template == [result.label]

    def test_identical_templates_preserve_argmax(self, model):
        ls = LabelSet(list(COLOR_LABELS), model.vocab)
        one = zero_shot_classify(model, None, "banana",
                                 [PromptTemplate(COLOR_PROMPTS[4])], ls, None)
        three = zero_shot_classify(model, None, "banana",
                                   [PromptTemplate(COLOR_PROMPTS[4])] * 3, ls, None)
        assert three.label == one.label
        assert np.allclose(three.scores, one.scores, atol=1e-12)

    def test_template_order_does_not_change_prediction(self, model):
        ls = LabelSet(list(COLOR_LABELS), model.vocab)
        pack = builtin_color_pack()
        fwd = zero_shot_classify(model, None, "banana", pack, ls, None)
        rev = zero_shot_classify(model, None, "banana", pack[::-1], ls, None)
        assert fwd.label == rev.label
        assert np.allclose(np.sort(fwd.scores), np.sort(rev.scores), atol=1e-12)

    def test_constant_shift_preserves_argmax(self, model):
        ls = LabelSet(list(COLOR_LABELS), model.vocab)
        pack = builtin_color_pack()
        result = zero_shot_classify(model, None, "banana", pack, ls, None)
        shifted = result.per_template_scores + 3.5
        assert np.allclose(shifted.mean(axis=0), result.scores + 3.5, atol=1e-12)
        assert int(np.argmax(shifted.mean(axis=0))) == int(np.argmax(result.scores))

    def test_restriction_consistency(self, model):
        """When the full-vocab argmax is a label, restriction keeps it."""
        ls = LabelSet(list(COLOR_LABELS), model.vocab)
        seq = build_model_input(model.vocab, "it is [MASK] .")
        pos = seq.ids.index(model.vocab.mask_id)
        # bias the head so some label wins the whole vocabulary
        model.mlm_bias.data[model.vocab.id_of("green")] = 50.0
        full = mlm_logits(model, encode(model, seq)).data[pos]
        assert int(np.argmax(full)) == model.vocab.id_of("green")
        restricted = mask_logits(model, None, seq, None, ls)
        assert ls.labels[int(np.argmax(restricted))] == "green"
        model.mlm_bias.data[model.vocab.id_of("green")] = 0.0

    def test_needs_at_least_one_template(self, model):
        ls = LabelSet(["red"], model.vocab)
        with pytest.raises(ContractViolation):
            zero_shot_classify(model, None, "banana", [], ls, None)

    def test_exact_tie_breaks_by_declaration_order(self, model):
        """Force a perfect tie between two labels; the earlier one wins."""
        v = model.vocab
        model.tok_emb.data[v.id_of("pink")] = model.tok_emb.data[v.id_of("grey")]
        model.mlm_bias.data[v.id_of("pink")] = model.mlm_bias.data[v.id_of("grey")]
        ls = LabelSet(["pink", "grey"], model.vocab)
        result = zero_shot_classify(model, None, "banana", builtin_color_pack(),
                                    ls, None)
        assert result.scores[0] == result.scores[1]
        assert result.label == "pink"


class TestStackPaired:
    def test_rows_and_tags(self):
        rng = np.random.default_rng(0)
        a = FeatureMatrix(rows=rng.standard_normal((3, 6)))
        b = FeatureMatrix(rows=rng.standard_normal((2, 6)))
        stacked = stack_paired_features(a, b)
        assert stacked.count == 5
        assert stacked.token_type.tolist() == [0, 0, 0, 1, 1]
        assert np.array_equal(stacked.rows[:3], a.rows)
        assert np.array_equal(stacked.rows[3:], b.rows)

    def test_swap_preserves_row_multiset(self):
        rng = np.random.default_rng(1)
        a = FeatureMatrix(rows=rng.standard_normal((2, 4)))
        b = FeatureMatrix(rows=rng.standard_normal((3, 4)))
        ab = stack_paired_features(a, b)
        ba = stack_paired_features(b, a)
        assert sorted(map(tuple, ab.rows.tolist())) == \
            sorted(map(tuple, ba.rows.tolist()))
        assert ab.token_type.tolist() == [0, 0, 1, 1, 1]
        assert ba.token_type.tolist() == [0, 0, 0, 1, 1]

    def test_pad_rows_dropped(self):
        rng = np.random.default_rng(2)
        a = FeatureMatrix(rows=rng.standard_normal((4, 6)), valid_len=2)
        b = FeatureMatrix(rows=rng.standard_normal((2, 6)))
        stacked = stack_paired_features(a, b)
        assert stacked.count == 4

    def test_empty_side_rejected(self):
        a = FeatureMatrix(rows=np.ones((1, 4)))
        with pytest.raises(ContractViolation):
            stack_paired_features(a, None)


class TestPlantedZeroShot:
    def test_adaptation_lifts_accuracy(self, planted_eval):
        assert planted_eval["baseline"]["accuracy"] <= 0.35
        assert planted_eval["adapted"]["accuracy"] >= 0.90

    def test_noisy_bank_within_five_points(self, planted_eval):
        drop = planted_eval["adapted"]["accuracy"] - planted_eval["noisy"]["accuracy"]
        assert drop <= 0.05
