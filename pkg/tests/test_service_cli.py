import json
import warnings

import numpy as np
import pytest

from pipeline_helpers import SAMPLE
from poemseq import cli
from poemseq.embedding import HashProjectionEmbedder
from poemseq.generation import BackendDescriptor, GenerationRequest, HttpImageBackend, ToyBackend
from poemseq.providers import build_captioner, build_classifier, build_embedder, build_generator, build_tagger
from poemseq.refinement import TemplateStubGenerator
from poemseq.segmentation import GazetteerTagger, LexiconEmotionClassifier
from poemseq.service.app import app

with warnings.catch_warnings():
    warnings.simplefilter("ignore")
    from fastapi.testclient import TestClient

ROOT = SAMPLE.parents[3]


@pytest.fixture(scope="module")
def client():
    return TestClient(app)


class TestEndpoints:
    def test_health(self, client):
        assert client.get("/health").json()["status"] == "ok"

    def test_stats_default_sample(self, client):
        body = client.post("/corpus/stats", json={}).json()
        assert body["document"]["poem_count"] == 12 and body["parse_errors"] == []

    def test_stats_inline_with_errors(self, client):
        text = SAMPLE.read_text().splitlines()[0] + "\nnot json\n"
        body = client.post("/corpus/stats", json={"corpus_text": text}).json()
        assert body["document"]["poem_count"] == 1 and body["parse_errors"][0]["line"] == 2

    def test_missing_corpus_path(self, client):
        r = client.post("/corpus/stats", json={"corpus_path": "/no/such/file.jsonl"})
        assert r.status_code == 422

    def test_validate(self, client):
        body = client.post("/corpus/validate", json={}).json()
        assert body["passed"] and len(body["document"]["reports"]) == 12

    def test_segment(self, client):
        body = client.post("/segment", json={"poem_id": "tyger", "policy": {"min_segment_lines": 2}}).json()
        assert all(s["line_range"][1] - s["line_range"][0] >= 2 for s in body["segments"])

    def test_unknown_poem(self, client):
        assert client.post("/segment", json={"poem_id": "nope"}).status_code == 404

    def test_bad_policy(self, client):
        r = client.post("/segment", json={"poem_id": "tyger", "policy": {"min_segment_lines": 0}})
        assert r.status_code in (400, 422)

    def test_refine_segment(self, client):
        body = client.post("/refine", json={"poem_id": "tyger", "segment": 0}).json()
        assert len(body["traces"]) == 1 and body["traces"][0]["termination"] in ("plateau", "max_iterations")
        assert set(body["template_hashes"]) == {"stage1", "refine"}
        assert client.post("/refine", json={"poem_id": "tyger", "segment": 99}).status_code == 404

    def test_generate(self, client, tmp_path):
        payload = {"prompts": [{"segment_id": "a#0", "text": "a red fox"}, {"segment_id": "a#1", "text": "a fox asleep"}],
                   "width": 8, "height": 8, "output_dir": str(tmp_path)}
        body = client.post("/generate", json=payload).json()
        assert [a["segment_id"] for a in body["artifacts"]] == ["a#0", "a#1"]
        assert (tmp_path / "sequence.json").is_file() and body["sequence_path"]

    def test_evaluate(self, client, tmp_path):
        client.post("/generate", json={"poem_id": "tyger", "prompts": [{"segment_id": "tyger#0", "text": "a tiger"}],
                                       "output_dir": str(tmp_path)})
        body = client.post("/evaluate", json={"poem_id": "tyger", "sequence_dir": str(tmp_path)}).json()
        assert body["poem_id"] == "tyger" and body["consistency_score"] is None

    def test_report_reference(self, client):
        body = client.post("/report", json={"reference": True}).json()
        assert len(body["document"]["rows"]) == 9 and "/" in body["text"]

    def test_run(self, client, tmp_path):
        payload = {"config": {"corpus_path": str(SAMPLE)}, "approach": "single_image", "output_dir": str(tmp_path)}
        body = client.post("/run", json=payload).json()
        assert body["exit_code"] == 0 and len(body["manifest"]["poems"]) == 12

    def test_run_config_error(self, client):
        r = client.post("/run", json={"config": {"corpus_path": str(SAMPLE), "approach": "single_image",
                                                 "consistency": True}})
        assert r.status_code == 422


class TestStubProviders:
    """Remote provider clients talking to the service's own stub endpoints."""

    @pytest.fixture
    def remote(self, client):
        return {"kind": "http", "endpoint": "http://testserver/providers"}, client._transport

    def test_annotator(self, remote):
        desc, transport = remote
        line = "The girl walks into the dark forest in fear"
        tagger, classifier = build_tagger(desc, transport), build_classifier(desc, transport)
        assert tagger.tag(line) == GazetteerTagger.default().tag(line)
        assert classifier.classify(line) == LexiconEmotionClassifier.default().classify(line)

    def test_generator(self, remote):
        desc, transport = remote
        prompt = "Segment: a tiger burning bright"
        assert build_generator(desc, transport).generate(prompt) == TemplateStubGenerator().generate(prompt)

    def test_embedder_and_captioner(self, remote):
        desc, transport = remote
        emb = build_embedder(desc, transport)
        np.testing.assert_allclose(emb.embed_text("a tiger"), HashProjectionEmbedder().embed_text("a tiger"), atol=1e-12)
        art = ToyBackend().generate(GenerationRequest("p", (("p#0", "a tiger"),), size=(8, 8)))[0]
        assert build_captioner(desc, transport).caption(art).startswith("cell0x0")
        assert emb.embed_image(art).shape == (64,)

    def test_image_backend(self, remote):
        _, transport = remote
        backend = HttpImageBackend(BackendDescriptor(kind="http", endpoint="http://testserver/providers"), transport)
        art = backend.generate(GenerationRequest("p", (("p#0", "a tiger"),), consistency=False, size=(8, 8)))[0]
        assert art.ok and art.pixels.shape == (8, 8, 3) and art.backend_meta["stub"] is True


class TestCli:
    def test_stats(self, capsys):
        assert cli.main(["stats", str(SAMPLE)]) == 0
        assert json.loads(capsys.readouterr().out)["poem_count"] == 12

    def test_stats_missing_file(self, tmp_path):
        assert cli.main(["stats", str(tmp_path / "none.jsonl")]) == 2

    def test_stats_parse_errors_partial(self, tmp_path):
        bad = tmp_path / "bad.jsonl"
        bad.write_text(SAMPLE.read_text().splitlines()[0] + "\n{oops\n")
        assert cli.main(["stats", str(bad)]) == 1

    def test_validate(self, tmp_path):
        assert cli.main(["validate", str(SAMPLE), "-o", str(tmp_path / "v.json")]) == 0
        assert json.loads((tmp_path / "v.json").read_text())["reports"]

    def test_segment(self, capsys):
        assert cli.main(["segment", "--poem", "tyger", "--policy", str(ROOT / "configs" / "policy.toml")]) == 0
        assert json.loads(capsys.readouterr().out)["poem_id"] == "tyger"
        assert cli.main(["segment", "--poem", "nope"]) == 2

    def test_refine(self, capsys):
        assert cli.main(["refine", "--poem", "raven", "--segment", "0"]) == 0
        assert len(json.loads(capsys.readouterr().out)["traces"]) == 1

    def test_generate_and_evaluate(self, tmp_path, capsys):
        out = tmp_path / "seq"
        assert cli.main(["generate", "--poem-id", "raven", "--prompt", "a raven", "--prompt", "a raven at the door",
                         "--out", str(out), "--size", "16x16"]) == 0
        assert (out / "image_01.png").is_file()
        capsys.readouterr()
        assert cli.main(["evaluate", "--sequence", str(out), "--poem", "raven"]) == 0
        assert json.loads(capsys.readouterr().out)["approach"] == "poemtale"

    def test_generate_needs_prompts(self):
        assert cli.main(["generate"]) == 2

    def test_report(self, tmp_path, capsys):
        assert cli.main(["report", "--reference"]) == 0
        assert "PLAYGROUND V3" in capsys.readouterr().out
        assert cli.main(["report"]) == 2

    def test_run(self, tmp_path, capsys):
        code = cli.main(["run", "--config", str(ROOT / "configs" / "sample.toml"), "--approach", "segments_only",
                         "--seed", "1", "--output", str(tmp_path / "run")])
        assert code == 0 and "12/12 poems ok" in capsys.readouterr().out
        assert json.loads((tmp_path / "run" / "manifest.json").read_text())["seed"] == 1

    def test_run_config_error(self, tmp_path):
        cfg = tmp_path / "c.toml"
        cfg.write_text(f'corpus_path = "{SAMPLE}"\napproach = "single_image"\nconsistency = true\n')
        assert cli.main(["run", "--config", str(cfg)]) == 2
        assert cli.main(["run", "--config", str(tmp_path / "missing.toml")]) == 2

    def test_unreachable_server(self):
        assert cli.main(["--server", "http://127.0.0.1:9", "stats", str(SAMPLE)]) == 1

    def test_api_error_codes(self):
        assert cli.ApiError(502, "x").exit_code == 1
        assert cli.ApiError(404, "x").exit_code == 2
