import itertools

import numpy as np
import pytest
from dataclasses import replace
from hypothesis import given, settings
from hypothesis import strategies as st

from xlprompt.data import sample_few_shot
from xlprompt.desk import DeskRecipe, build_desk_lab
from xlprompt.tokenizer import encode
from xlprompt.harness import (XBAR, Artifacts, ExperimentConfig, Report, ResultRow, accuracy, describe,
                              dump_results, emit_table, emit_variance, encode_pair, evaluate, load_base,
                              parse_results, parse_table, run_in_language, run_transfer, save_base, select_epoch,
                              sweep, train)

TINY = DeskRecipe(train_per_class=20, dev_per_class=8, test_per_class=10, pretrain_pairs_per_class=30,
                  code_switch_copies=1, d=16, layers=1, heads=2, pretrain_steps=20)


@pytest.fixture(scope="module")
def lab():
    return build_desk_lab(TINY).lab


def cfg(method, **kw):
    kw = {"K": 4, "epochs": 2, "lr": 1e-3, **kw}
    return ExperimentConfig(method, **kw)


# -- config and selection ----------------------------------------------------

def test_config_defaults():
    c = ExperimentConfig("DP")
    assert (c.K, c.seed, c.lr, c.epochs, c.batch_size, c.loss) == (16, 1, 1e-5, 50, 24, "restricted")
    assert ExperimentConfig("FT").batch_size == 32


@pytest.mark.parametrize("kw", [{"method": "XX"}, {"method": "DP", "K": 0}, {"method": "DP", "seed": 0},
                                {"method": "DP", "loss": "other"}])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        ExperimentConfig(**kw)


def test_select_epoch_examples():
    assert select_epoch([50, 70, 70, 60]) == 2
    assert select_epoch([10]) == 1
    assert select_epoch([5, 5, 5]) == 1
    with pytest.raises(ValueError):
        select_epoch([])


@given(st.lists(st.integers(0, 12), min_size=1, max_size=60))
@settings(max_examples=1000, deadline=None)
def test_select_epoch_is_earliest_argmax(trace):
    best = max(trace)
    expected = next(i for i, v in enumerate(trace) if v == best) + 1
    assert select_epoch([v * 100 / 12 for v in trace]) == expected


# -- statistics and reports ------------------------------------------------------

def test_describe_known_values():
    s = describe([1, 2, 3, 4, 5])
    assert s.mean == 3 and s.n == 5
    assert s.variance == pytest.approx(2.5, abs=1e-12)
    assert s.std == pytest.approx(1.5811388300841898, abs=1e-12)
    assert describe([7.0]).std == 0.0


def random_rows(rng, methods=("DP", "MP"), Ks=(16, 32), langs=("en", "de", "tr"), seeds=(1, 2, 3, 4, 5)):
    return [ResultRow(m, K, s, lang, float(rng.uniform(30, 90)))
            for m, K, s, lang in itertools.product(methods, Ks, seeds, langs)]


def test_report_matches_recomputation():
    rng = np.random.default_rng(0)
    for _ in range(50):
        rows = random_rows(rng)
        report = Report.from_rows(rows)
        for (m, K), cell in report.cells.items():
            means = []
            for lang in ("en", "de", "tr"):
                vals = [r.accuracy for r in rows if (r.method, r.K, r.language) == (m, K, lang)]
                mu = sum(vals) / len(vals)
                var = sum((v - mu) ** 2 for v in vals) / (len(vals) - 1)
                s = cell.per_language[lang]
                assert abs(s.mean - mu) < 1e-9 and abs(s.variance - var) < 1e-9 and abs(s.std - var ** 0.5) < 1e-9
                means.append(mu)
            xbar = sum(means) / len(means)
            spread = (sum((x - xbar) ** 2 for x in means) / len(means)) ** 0.5
            assert abs(cell.macro - xbar) < 1e-9 and abs(cell.macro_spread - spread) < 1e-9


def test_macro_spread_is_population_std():
    # population (ddof=0) spread of the per-language means: sqrt(0.08 / 3)
    rows = [ResultRow("DP", 16, 1, lang, v) for lang, v in zip("abc", (40.0, 40.2, 40.4))]
    cell = Report.from_rows(rows).cells[("DP", 16)]
    assert round(cell.macro_spread, 2) == 0.16


def test_seed_order_does_not_matter():
    rows = random_rows(np.random.default_rng(1))
    a = emit_table(Report.from_rows(rows))
    b = emit_table(Report.from_rows(rows[::-1], ["en", "de", "tr"]))
    assert a == b


def test_emit_parse_round_trip():
    rng = np.random.default_rng(2)
    for fmt in ("tsv", "text"):
        rows = random_rows(rng)
        report = Report.from_rows(rows)
        parsed = parse_table(emit_table(report, fmt))
        for (m, K), cell in report.cells.items():
            got = parsed[(str(K), m)]
            for lang, s in cell.per_language.items():
                assert got[lang][0] == round(s.mean, 2) and got[lang][1] == round(s.std, 2)
            assert got[XBAR] == (round(cell.macro, 2), round(cell.macro_spread, 2))


def test_table_layout_and_majority_row():
    report = Report.from_rows(random_rows(np.random.default_rng(3)), ["en", "de", "tr"])
    lines = emit_table(report).splitlines()
    assert lines[0].split("\t") == ["Shots", "Method", "en", "de", "tr", XBAR]
    assert lines[1].split("\t") == ["-", "MAJ"] + ["33.33"] * 4
    assert [tuple(ln.split("\t")[:2]) for ln in lines[2:]] == [("16", "DP"), ("16", "MP"), ("32", "DP"), ("32", "MP")]
    plain = emit_table(report, dispersion=False)
    assert "±" not in plain
    assert parse_table(emit_table(report, "text"))[("-", "MAJ")] == {c: (33.33, None) for c in ["en", "de", "tr", XBAR]}


def test_single_seed_has_zero_dispersion():
    rows = [ResultRow("SP", 16, 3, "en", 55.5)]
    report = Report.from_rows(rows)
    assert report.cells[("SP", 16)].per_language["en"].std == 0.0
    assert "55.50±0.00" in emit_table(report)


def test_variance_tsv():
    rows = [ResultRow("DP", 16, s, "en", v) for s, v in enumerate([1, 2, 3, 4, 5], 1)]
    text = emit_variance(Report.from_rows(rows))
    fields = text.splitlines()[1].split("\t")
    assert fields[:3] == ["DP", "16", "en"] and float(fields[5]) == 2.5 and fields[6] == "5"


def test_results_round_trip():
    rows = random_rows(np.random.default_rng(4))
    again = parse_results(dump_results(rows))
    assert [(r.method, r.K, r.seed, r.language) for r in again] == [(r.method, r.K, r.seed, r.language) for r in rows]
    assert all(abs(a.accuracy - b.accuracy) < 1e-6 for a, b in zip(again, rows))
    with pytest.raises(ValueError):
        parse_results("bad\n")


# -- accuracy and encoding -----------------------------------------------------

def test_accuracy_examples():
    assert accuracy([0, 1, 2, 0], [0, 1, 1, 1]) == 50.0
    assert accuracy([2], [2]) == 100.0
    with pytest.raises(ValueError):
        accuracy([], [])


def test_encode_pair_truncates_premise_first(lab):
    v = lab.vocab
    p, h = encode("a b c d e f", v), encode("g h", v)
    assert encode_pair("a b c d e f", "g h", v, 64) == [v.bos_id, *p, v.eos_id, *h, v.eos_id]
    cut = len(p) + len(h) + 3 - 2
    assert encode_pair("a b c d e f", "g h", v, cut) == [v.bos_id, *p[:-2], v.eos_id, *h, v.eos_id]
    assert encode_pair("a b c d e f", "g h", v, len(h) + 2) == [v.bos_id, v.eos_id, *h[:-1], v.eos_id]


# -- training ----------------------------------------------------------------------

@pytest.mark.parametrize("method", ["FT", "DP", "SP", "MP"])
def test_trainable_parameter_sets(lab, method):
    art, result = train(cfg(method, epochs=1), lab)
    names = set(art.trainable().params)
    assert any(n.startswith("model.") for n in names)
    assert any(n.startswith("cls.") for n in names) == (method == "FT")
    assert any(n.startswith("bank.") for n in names) == (method in ("SP", "MP"))
    assert (art.pack is None) == (method == "FT")
    assert len(result.dev_trace) == 1 and result.selected_epoch == 1


def test_base_model_is_not_modified(lab):
    before = {k: v.copy() for k, v in lab.model.state().items()}
    train(cfg("MP"), lab)
    for k, v in lab.model.state().items():
        np.testing.assert_array_equal(v, before[k])


def test_selected_epoch_weights_are_restored(lab):
    art, result = train(cfg("DP", epochs=3), lab)
    split = sample_few_shot(lab.data, "en", 4, 1)
    dev = accuracy(art.predict(split.dev), [e.label_id for e in split.dev])
    assert dev == max(result.dev_trace)
    assert result.selected_epoch == select_epoch(result.dev_trace)


def test_training_errors(lab):
    with pytest.raises(ValueError, match="epochs"):
        train(cfg("DP", epochs=0), lab)
    split = sample_few_shot(lab.data, "en", 1, 1)
    with pytest.raises(ValueError, match="empty"):
        train(cfg("DP"), lab, split=replace(split, train=[]))
    broken = lab.model.clone()
    broken.params["tok_emb"].data[:] = np.nan
    with pytest.raises(FloatingPointError):
        train(cfg("DP"), replace(lab, model=broken))


def test_unknown_pack_language_fails(lab):
    with pytest.raises(FileNotFoundError, match="qq"):
        run_in_language(cfg("DP", train_language="qq"), lab)


def test_prediction_is_order_invariant(lab):
    art, _ = train(cfg("SP", epochs=1), lab)
    examples = lab.data.test.examples("x1")
    preds = art.predict(examples, batch_size=7)
    perm = np.random.default_rng(0).permutation(len(examples))
    np.testing.assert_array_equal(art.predict([examples[i] for i in perm], batch_size=13), preds[perm])


def test_transfer_reports_every_language(lab):
    _, result = run_transfer(cfg("DP"), lab)
    assert set(result.test_accuracy) == {"en", "x1", "x2"}
    assert all(0 <= a <= 100 for a in result.test_accuracy.values())


def test_in_language_on_source_matches_transfer(lab):
    _, a = run_transfer(cfg("MP", seed=2), lab)
    _, b = run_in_language(cfg("MP", seed=2), lab)
    assert b.test_accuracy == {"en": a.test_accuracy["en"]}
    assert a.dev_trace == b.dev_trace


def test_in_language_uses_target_pack(lab):
    art, result = run_in_language(cfg("DP", train_language="x1"), lab)
    assert art.pack.language == "x1" and set(result.test_accuracy) == {"x1"}


def test_full_vocabulary_loss_trains(lab):
    _, result = run_transfer(cfg("DP", loss="full"), lab)
    assert len(result.dev_trace) == 2


@pytest.mark.parametrize("method", ["FT", "MP"])
def test_artifacts_round_trip(lab, tmp_path, method):
    art, _ = train(cfg(method, epochs=1), lab)
    path = tmp_path / "art.ckpt"
    art.save(path)
    again = Artifacts.load(path)
    assert again.vocab.tokens == art.vocab.tokens
    for lang in ("en", "x2"):
        assert evaluate(again, lab.data.test, lang) == evaluate(art, lab.data.test, lang)


def test_base_round_trip(lab, tmp_path):
    save_base(tmp_path / "base.ckpt", lab.model, lab.vocab)
    model, vocab = load_base(tmp_path / "base.ckpt")
    assert vocab.tokens == lab.vocab.tokens
    for k, v in lab.model.state().items():
        np.testing.assert_array_equal(model.params[k].data, v)


def test_sweep_is_deterministic(lab):
    rows_a, report = sweep(cfg("SP"), lab, seeds=(1, 2))
    rows_b, _ = sweep(cfg("SP"), lab, seeds=(1, 2))
    assert dump_results(rows_a) == dump_results(rows_b)
    assert report.languages == ["en", "x1", "x2"] and report.cells[("SP", 4)].per_language["en"].n == 2
    with pytest.raises(ValueError):
        sweep(cfg("SP"), lab, seeds=())
