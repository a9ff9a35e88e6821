"""End-to-end evaluation harness: config, cells, outputs, rendering."""

import dataclasses
import json
from pathlib import Path

import numpy as np
import pytest

from conftest import build_toy_run, save_rows, write_manifest
from atrbench.errors import ConfigError
from atrbench.harness import (
    HarnessError,
    RunConfig,
    evaluate_t2a,
    load_run_config,
    run_eval,
)
from atrbench.metrics import MEAN_DATASET_LABEL, MetricKey, MetricReport
from atrbench.report import (
    ReportError,
    load_report_file,
    render_report,
    write_provenance,
    write_report_file,
)
from atrbench.embedstore import EmbeddingSet, l2_normalize


def entry(report, model, query_type, direction, metric, k, dataset="toy"):
    return report.entries[
        MetricKey(dataset, model, query_type, direction, metric, k)
    ]


@pytest.fixture()
def toy_report(tmp_path):
    cfg = load_run_config(build_toy_run(tmp_path))
    report = run_eval(cfg)
    return cfg, report


class TestLoadConfig:
    def test_round_trip_fields(self, tmp_path):
        cfg = load_run_config(build_toy_run(tmp_path))
        assert [d.name for d in cfg.datasets] == ["toy"]
        assert [m.name for m in cfg.datasets[0].models] == ["alpha", "beta"]
        assert cfg.ks == (1, 2, 3)
        assert cfg.output_dir == tmp_path / "out"
        assert cfg.threads == 1
        assert cfg.recall_mode == "per_query"

    def test_relative_paths_resolve_against_config_dir(self, tmp_path):
        cfg = load_run_config(build_toy_run(tmp_path))
        ds = cfg.datasets[0]
        assert ds.manifest_path == tmp_path / "manifest.jsonl"
        assert ds.audio_path == tmp_path / "audio.oemb"

    def test_unknown_run_key_rejected(self, tmp_path):
        config = build_toy_run(tmp_path, extra_run="mystery = 1")
        with pytest.raises(ConfigError, match="mystery"):
            load_run_config(config)

    def test_bad_toml_rejected(self, tmp_path):
        path = tmp_path / "bad.toml"
        path.write_text("[run\n", encoding="utf-8")
        with pytest.raises(ConfigError, match="TOML"):
            load_run_config(path)

    def test_missing_referenced_file_rejected(self, tmp_path):
        config = build_toy_run(tmp_path)
        (tmp_path / "text_beta.oemb").unlink()
        with pytest.raises(ConfigError, match="text_beta"):
            load_run_config(config)

    def test_tagging_alias_in_config(self, tmp_path):
        build_toy_run(tmp_path)
        config = tmp_path / "alias.toml"
        config.write_text(
            '[run]\noutput_dir = "out"\n\n'
            '[[dataset]]\nname = "toy"\nmanifest = "manifest.jsonl"\n'
            'audio = "audio.oemb"\n\n'
            '[[dataset.model]]\nname = "m"\n'
            '[dataset.model.text.t2a]\ntagging = "text_alpha.oemb"\n',
            encoding="utf-8",
        )
        cfg = load_run_config(config)
        assert ("T2A", "keyphrase") in cfg.datasets[0].models[0].text_paths

    def test_t2t_rejects_uiq_types(self, tmp_path):
        build_toy_run(tmp_path)
        config = tmp_path / "bad_t2t.toml"
        config.write_text(
            '[run]\noutput_dir = "out"\n\n'
            '[[dataset]]\nname = "toy"\nmanifest = "manifest.jsonl"\n'
            'audio = "audio.oemb"\n\n'
            '[[dataset.model]]\nname = "m"\n'
            '[dataset.model.text.t2t]\nquestion = "text_alpha.oemb"\n',
            encoding="utf-8",
        )
        with pytest.raises(ConfigError, match="caption"):
            load_run_config(config)

    def test_env_output_dir_override(self, tmp_path, monkeypatch):
        config = build_toy_run(tmp_path)
        monkeypatch.setenv("ATRBENCH_OUTPUT_DIR", str(tmp_path / "env_out"))
        cfg = load_run_config(config)
        assert cfg.output_dir == tmp_path / "env_out"

    def test_env_threads_override(self, tmp_path, monkeypatch):
        config = build_toy_run(tmp_path)
        monkeypatch.setenv("ATRBENCH_THREADS", "3")
        assert load_run_config(config).threads == 3

    def test_env_threads_must_be_integer(self, tmp_path, monkeypatch):
        config = build_toy_run(tmp_path)
        monkeypatch.setenv("ATRBENCH_THREADS", "many")
        with pytest.raises(ConfigError, match="ATRBENCH_THREADS"):
            load_run_config(config)

    def test_run_config_validation(self, tmp_path):
        cfg = load_run_config(build_toy_run(tmp_path))
        with pytest.raises(ConfigError):
            dataclasses.replace(cfg, ks=())
        with pytest.raises(ConfigError):
            dataclasses.replace(cfg, ks=(3, 1))
        with pytest.raises(ConfigError):
            dataclasses.replace(cfg, threads=0)
        with pytest.raises(ConfigError):
            dataclasses.replace(cfg, recall_mode="best")
        with pytest.raises(ConfigError):
            dataclasses.replace(cfg, formats=("pdf",))

    def test_reserved_dataset_name_rejected(self, tmp_path):
        build_toy_run(tmp_path)
        config = tmp_path / "mean.toml"
        config.write_text(
            '[run]\noutput_dir = "out"\n\n'
            '[[dataset]]\nname = "mean"\nmanifest = "manifest.jsonl"\n'
            'audio = "audio.oemb"\n\n'
            '[[dataset.model]]\nname = "m"\n'
            '[dataset.model.text.t2a]\ncaption = "text_alpha.oemb"\n',
            encoding="utf-8",
        )
        with pytest.raises(ConfigError, match="reserved"):
            load_run_config(config)


class TestRunEval:
    def test_alpha_exact_cells(self, toy_report):
        _, report = toy_report
        for k in (1, 2, 3):
            assert entry(report, "alpha", "caption", "T2A", "r", k) == 100.0
            assert entry(report, "alpha", "question", "T2A", "r", k) == 100.0
            assert entry(report, "alpha", "caption", "T2T", "r", k) == 100.0

    def test_alpha_negative_cell(self, toy_report):
        _, report = toy_report
        get = lambda metric, k=None: entry(
            report, "alpha", "negative", "T2A", metric, k
        )
        assert get("r", 1) == 50.0
        assert get("r", 2) == 100.0
        assert get("r", 3) == 100.0
        assert get("hnsr", 1) == 50.0
        assert get("hnsr", 2) == 50.0
        assert get("hnsr", 3) == 0.0
        assert get("tfr_hn", 1) == 50.0
        assert get("tfr_hn", 2) == 50.0
        assert get("tfr_hn", 3) == 0.0
        assert get("hnsr") == 50.0
        assert get("tfr") == 50.0
        assert get("delta_rank") == 0.5

    def test_beta_negative_cell(self, toy_report):
        _, report = toy_report
        get = lambda metric, k=None: entry(
            report, "beta", "negative", "T2A", metric, k
        )
        assert get("r", 1) == 0.0
        assert get("r", 2) == 50.0
        assert get("r", 3) == 100.0
        for k in (1, 2, 3):
            assert get("hnsr", k) == 0.0
            assert get("tfr_hn", k) == 0.0
        assert get("hnsr") == 0.0
        assert get("tfr") == 0.0
        assert get("delta_rank") == -1.5

    def test_counts(self, toy_report):
        _, report = toy_report
        k_cap = MetricKey("toy", "alpha", "caption", "T2A", "r", 1)
        k_neg = MetricKey("toy", "alpha", "negative", "T2A", "r", 1)
        k_t2t = MetricKey("toy", "alpha", "caption", "T2T", "r", 1)
        assert report.counts[k_cap] == 6
        assert report.counts[k_neg] == 2
        assert report.counts[k_t2t] == 3

    def test_entry_inventory(self, toy_report):
        _, report = toy_report
        # per model: 3 caption + 3 question + 12 negative + 3 t2t = 21
        datasets = {k.dataset for k in report.entries}
        assert datasets == {"toy", MEAN_DATASET_LABEL}
        toy_keys = [k for k in report.entries if k.dataset == "toy"]
        mean_keys = [k for k in report.entries if k.dataset == MEAN_DATASET_LABEL]
        assert len(toy_keys) == 42
        assert len(mean_keys) == 42

    def test_single_dataset_mean_mirrors_values(self, toy_report):
        _, report = toy_report
        for key, value in report.entries.items():
            if key.dataset != "toy":
                continue
            mean_key = key._replace(dataset=MEAN_DATASET_LABEL)
            assert report.entries[mean_key] == pytest.approx(value)

    def test_skipped_query_types_absent(self, toy_report):
        _, report = toy_report
        types = {k.query_type for k in report.entries}
        assert "imperative" not in types
        assert "keyphrase" not in types

    def test_output_files_written(self, toy_report):
        cfg, _ = toy_report
        out = cfg.output_dir
        assert (out / "report.jsonl").is_file()
        assert (out / "ranks.jsonl").is_file()
        assert (out / "provenance.json").is_file()
        for stem in ("t2a_caption", "t2a_question", "t2a_negative", "t2t_caption"):
            assert (out / "tables" / f"{stem}.csv").is_file()
            assert (out / "tables" / f"{stem}.md").is_file()
            assert (out / "tables" / f"mean_{stem}.csv").is_file()
            assert (out / "figures" / f"{stem}.png").is_file()

    def test_report_file_round_trip(self, toy_report):
        cfg, report = toy_report
        back = load_report_file(cfg.output_dir / "report.jsonl")
        assert back.entries == report.entries
        assert back.counts == report.counts

    def test_ranks_rows(self, toy_report):
        cfg, _ = toy_report
        rows = [
            json.loads(line)
            for line in (cfg.output_dir / "ranks.jsonl").read_text().splitlines()
        ]
        assert len(rows) == 28  # 14 queries x 2 models
        neg = [
            r
            for r in rows
            if r["model"] == "alpha" and r["query_type"] == "negative"
        ]
        by_query = {r["query_id"]: r for r in neg}
        assert by_query["a#negative"]["target_rank"] == 1
        assert by_query["a#negative"]["hn_rank"] == 3
        assert by_query["a#negative"]["hn_id"] == "b"
        assert by_query["b#negative"]["target_rank"] == 2
        assert by_query["b#negative"]["hn_rank"] == 1
        cap = [r for r in rows if r["query_type"] == "caption"][0]
        assert cap["hn_rank"] is None

    def test_provenance_contents(self, toy_report):
        cfg, _ = toy_report
        prov = json.loads((cfg.output_dir / "provenance.json").read_text())
        assert prov["tool"] == "atrbench"
        assert prov["seed"] == 0
        assert len(prov["config_sha256"]) == 64
        names = {Path(p).name for p in prov["inputs"]}
        assert names == {
            "manifest.jsonl",
            "audio.oemb",
            "audio.oemb.ids",
            "text_alpha.oemb",
            "text_alpha.oemb.ids",
            "text_beta.oemb",
            "text_beta.oemb.ids",
        }

    def test_rerun_is_byte_identical(self, tmp_path):
        cfg = load_run_config(build_toy_run(tmp_path))
        run_eval(cfg)
        tracked = sorted(
            p for p in cfg.output_dir.rglob("*") if p.is_file()
        )
        before = {p: p.read_bytes() for p in tracked}
        run_eval(cfg)
        for p, blob in before.items():
            assert p.read_bytes() == blob, f"{p.name} changed between runs"

    def test_thread_count_does_not_change_outputs(self, tmp_path):
        cfg = load_run_config(build_toy_run(tmp_path))
        run_eval(cfg)
        report_bytes = (cfg.output_dir / "report.jsonl").read_bytes()
        cfg4 = dataclasses.replace(cfg, threads=4)
        run_eval(cfg4)
        assert (cfg.output_dir / "report.jsonl").read_bytes() == report_bytes

    def test_per_clip_max_mode(self, tmp_path):
        config = build_toy_run(tmp_path, extra_run='recall_mode = "per_clip_max"')
        report = run_eval(load_run_config(config))
        k_cap = MetricKey("toy", "beta", "caption", "T2A", "r", 1)
        # per-clip best rank still misses at 1 for beta, but the count
        # collapses from 6 caption queries to 3 clips
        assert report.counts[k_cap] == 3
        assert report.entries[k_cap] == 0.0
        # beta per-clip best ranks are 2, 3, 3 (score ties break by index)
        assert entry(report, "beta", "caption", "T2A", "r", 2) == 100.0 * 1 / 3
        assert entry(report, "beta", "caption", "T2A", "r", 3) == 100.0
        assert entry(report, "alpha", "caption", "T2A", "r", 1) == 100.0
        # uiq cells are never collapsed
        k_neg = MetricKey("toy", "alpha", "negative", "T2A", "r", 1)
        assert report.counts[k_neg] == 2

    def test_t2t_doc_index_out_of_range(self, tmp_path):
        config = build_toy_run(tmp_path, extra_run="t2t_doc_index = 5")
        with pytest.raises(HarnessError, match="t2t_doc_index"):
            run_eval(load_run_config(config))

    def test_missing_query_embedding_named(self, tmp_path):
        build_toy_run(tmp_path)
        config = tmp_path / "missing.toml"
        config.write_text(
            '[run]\noutput_dir = "out"\n\n'
            '[[dataset]]\nname = "toy"\nmanifest = "manifest.jsonl"\n'
            'audio = "audio.oemb"\n\n'
            '[[dataset.model]]\nname = "m"\n'
            # audio file lacks the caption text ids
            '[dataset.model.text.t2a]\ncaption = "audio.oemb"\n',
            encoding="utf-8",
        )
        with pytest.raises(HarnessError, match="a#0"):
            run_eval(load_run_config(config))

    def test_audio_must_cover_manifest(self, tmp_path):
        build_toy_run(tmp_path)
        save_rows(
            tmp_path / "short_audio.oemb",
            ["a", "b"],
            np.eye(2, 8, dtype=np.float32),
        )
        config = tmp_path / "short.toml"
        config.write_text(
            '[run]\noutput_dir = "out"\n\n'
            '[[dataset]]\nname = "toy"\nmanifest = "manifest.jsonl"\n'
            'audio = "short_audio.oemb"\n\n'
            '[[dataset.model]]\nname = "m"\n'
            '[dataset.model.text.t2a]\ncaption = "text_alpha.oemb"\n',
            encoding="utf-8",
        )
        with pytest.raises(HarnessError, match="'c'"):
            run_eval(load_run_config(config))


class TestEvaluateT2a:
    def test_pairing_and_threads(self):
        rng = np.random.default_rng(31)
        docs = l2_normalize(
            EmbeddingSet(
                tuple(f"d{i}" for i in range(20)),
                rng.standard_normal((20, 16)).astype(np.float32),
            )
        )
        queries = EmbeddingSet(
            tuple(f"q{i}" for i in range(20)), docs.data.copy(), normalized=True
        )
        pairing = {f"q{i}": (f"d{i}", None) for i in range(20)}
        one = evaluate_t2a(queries, docs, pairing, threads=1)
        four = evaluate_t2a(queries, docs, pairing, threads=4)
        assert [o.target_rank for o in one] == [1] * 20
        assert one == four


class TestRenderReport:
    def make_report(self):
        rep = MetricReport()
        rep.add(MetricKey("ds1", "m1", "caption", "T2A", "r", 1), 75.0, 4)
        rep.add(MetricKey("ds1", "m2", "caption", "T2A", "r", 1), 50.0, 4)
        rep.add(MetricKey("ds1", "m1", "caption", "T2A", "r", 5), 100.0, 4)
        rep.add(MetricKey("ds1", "m2", "caption", "T2A", "r", 5), 100.0, 4)
        return rep

    def test_csv_best_row(self, tmp_path):
        render_report(self.make_report(), tmp_path, formats=("csv",), figures=False)
        lines = (tmp_path / "tables" / "t2a_caption.csv").read_text().splitlines()
        assert lines[0] == "model,ds1 R@1,ds1 R@5"
        assert lines[1] == "m1,75.00,100.00"
        assert lines[2] == "m2,50.00,100.00"
        assert lines[3] == "best,m1,m1|m2"

    def test_markdown_bold_winners(self, tmp_path):
        render_report(
            self.make_report(), tmp_path, formats=("markdown",), figures=False
        )
        text = (tmp_path / "tables" / "t2a_caption.md").read_text()
        assert "**75.00**" in text
        assert "**50.00**" not in text
        assert text.count("**100.00**") == 2

    def test_figure_is_png(self, tmp_path):
        render_report(self.make_report(), tmp_path, formats=("csv",), figures=True)
        blob = (tmp_path / "figures" / "t2a_caption.png").read_bytes()
        assert blob[:8] == b"\x89PNG\r\n\x1a\n"

    def test_no_figures_flag(self, tmp_path):
        render_report(self.make_report(), tmp_path, formats=("csv",), figures=False)
        assert not (tmp_path / "figures").exists()

    def test_empty_report_rejected(self, tmp_path):
        with pytest.raises(ReportError):
            render_report(MetricReport(), tmp_path)

    def test_delta_rank_column_renders_negative(self, tmp_path):
        rep = MetricReport()
        rep.add(
            MetricKey("ds1", "m1", "negative", "T2A", "delta_rank", None), -2.25, 3
        )
        render_report(rep, tmp_path, formats=("csv",), figures=False)
        text = (tmp_path / "tables" / "t2a_negative.csv").read_text()
        assert "-2.25" in text

    def test_write_provenance_sorted_inputs(self, tmp_path):
        cfg_file = tmp_path / "c.toml"
        cfg_file.write_text("x = 1\n", encoding="utf-8")
        out = tmp_path / "prov.json"
        write_provenance(
            out,
            cfg_file,
            {"b.oemb": "2" * 64, "a.oemb": "1" * 64},
            seed=7,
        )
        prov = json.loads(out.read_text())
        assert [Path(p).name for p in prov["inputs"]] == ["a.oemb", "b.oemb"]
        assert prov["seed"] == 7

    def test_load_report_file_bad_line(self, tmp_path):
        path = tmp_path / "r.jsonl"
        path.write_text('{"dataset": "x"}\n', encoding="utf-8")
        with pytest.raises(ReportError, match=r"r\.jsonl:1"):
            load_report_file(path)

    def test_write_then_load_exact(self, tmp_path):
        rep = self.make_report()
        path = tmp_path / "report.jsonl"
        write_report_file(rep, path)
        back = load_report_file(path)
        assert back.entries == rep.entries
        assert back.counts == rep.counts
