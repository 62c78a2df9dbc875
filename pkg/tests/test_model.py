"""Model containers, checkpoint round-trips and the text-level scorer."""

import numpy as np
import pytest

from polyscore.encoder import ModelConfig
from polyscore.errors import ConfigError, ParseError
from polyscore.model import Model, Scorer, load_checkpoint, save_checkpoint
from polyscore.text import Vocabulary

from conftest import make_rng


@pytest.fixture
def vocab():
    return Vocabulary([f"w{i}" for i in range(28)])


@pytest.fixture
def pretrain_model(vocab):
    cfg = ModelConfig(vocab_size=len(vocab))
    return Model.init_pretrain(cfg, make_rng(1))


class TestModel:
    def test_pretrain_param_names(self, pretrain_model):
        names = set(pretrain_model.named_parameters())
        assert "enc.embeddings.token" in names
        assert "mlm.transform.weight" in names
        assert "next.w" in names

    def test_derive_bi_duplicates_towers(self, pretrain_model):
        model = pretrain_model.derive("bi", make_rng(2))
        a = model.towers["ctxt"].params["embeddings.token"].data
        b = model.towers["cand"].params["embeddings.token"].data
        assert np.array_equal(a, b)
        assert a is not b  # separate copies so fine-tuning can diverge

    def test_derive_poly_learnt_has_codes(self, pretrain_model):
        model = pretrain_model.derive("poly", make_rng(2), poly_variant="learnt", poly_m=4)
        assert model.extras["poly.codes"].shape == (4, model.cfg.hidden)

    def test_derive_poly_first_m_has_no_codes(self, pretrain_model):
        model = pretrain_model.derive("poly", make_rng(2), poly_variant="first_m", poly_m=4)
        assert "poly.codes" not in model.extras

    def test_derive_cross_single_tower(self, pretrain_model):
        model = pretrain_model.derive("cross", make_rng(2))
        assert set(model.towers) == {"enc"}
        assert model.extras["cross.w"].shape == (model.cfg.hidden, 1)

    def test_derive_from_finetuned_rejected(self, pretrain_model):
        bi = pretrain_model.derive("bi", make_rng(2))
        with pytest.raises(ConfigError):
            bi.derive("cross", make_rng(2))

    def test_astype_round_trip(self, pretrain_model):
        f32 = pretrain_model.astype(np.float32)
        assert f32.dtype == np.float32
        assert pretrain_model.dtype == np.float64


class TestCheckpoint:
    def test_save_load_save_byte_identical(self, tmp_path, pretrain_model):
        p1, p2 = tmp_path / "a.bin", tmp_path / "b.bin"
        save_checkpoint(pretrain_model, p1)
        reloaded = load_checkpoint(p1)
        save_checkpoint(reloaded, p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_round_trip_values_exact(self, tmp_path, pretrain_model):
        path = tmp_path / "m.bin"
        save_checkpoint(pretrain_model, path)
        reloaded = load_checkpoint(path)
        for name, t in pretrain_model.named_parameters().items():
            assert np.array_equal(t.data, reloaded.named_parameters()[name].data)

    def test_fingerprint_stable(self, tmp_path, pretrain_model):
        path = tmp_path / "m.bin"
        fp1 = save_checkpoint(pretrain_model, path)
        fp2 = save_checkpoint(pretrain_model, path)
        assert fp1 == fp2
        assert load_checkpoint(path).fingerprint == fp1

    def test_head_metadata_survives(self, tmp_path, pretrain_model):
        model = pretrain_model.derive("poly", make_rng(3), reduction="avg_first:2",
                                      poly_variant="learnt", poly_m=8)
        path = tmp_path / "poly.bin"
        save_checkpoint(model, path)
        back = load_checkpoint(path)
        assert (back.kind, back.poly_variant, back.poly_m, back.reduction) == \
            ("poly", "learnt", 8, "avg_first:2")

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.bin"
        path.write_bytes(b"NOTACKPT" + b"\x00" * 64)
        with pytest.raises(ParseError, match="magic"):
            load_checkpoint(path)

    def test_truncated_rejected(self, tmp_path, pretrain_model):
        path = tmp_path / "m.bin"
        save_checkpoint(pretrain_model, path)
        path.write_bytes(path.read_bytes()[:100])
        with pytest.raises(ParseError, match="truncated"):
            load_checkpoint(path)

    def test_load_as_float32(self, tmp_path, pretrain_model):
        path = tmp_path / "m.bin"
        save_checkpoint(pretrain_model, path)
        f32 = load_checkpoint(path, dtype=np.float32)
        assert f32.dtype == np.float32


class TestScorer:
    def test_vocab_size_checked(self, pretrain_model):
        with pytest.raises(ConfigError):
            Scorer(pretrain_model.derive("bi", make_rng(0)), Vocabulary(["a"]))

    def test_context_caps_clamped_to_positions(self, pretrain_model, vocab):
        scorer = Scorer(pretrain_model.derive("bi", make_rng(0)), vocab)
        assert scorer.max_context == pretrain_model.cfg.max_positions  # 64 < 360
        assert scorer.max_candidate == pretrain_model.cfg.max_positions

    def test_bi_scoring_runs(self, pretrain_model, vocab):
        scorer = Scorer(pretrain_model.derive("bi", make_rng(0)), vocab)
        s = scorer.score_bi(["w1 w2", "w3"], "w4 w5")
        assert np.isfinite(s)

    def test_poly_scoring_runs(self, pretrain_model, vocab):
        model = pretrain_model.derive("poly", make_rng(0), poly_variant="learnt", poly_m=4)
        s = Scorer(model, vocab).score_poly(["w1 w2"], "w4")
        assert np.isfinite(s)

    def test_cross_scoring_runs(self, pretrain_model, vocab):
        model = pretrain_model.derive("cross", make_rng(0))
        s = Scorer(model, vocab).score_cross(["w1 w2"], "w4").item()
        assert np.isfinite(s)
