import base64
import hashlib
import io
import json

import httpx
import numpy as np
import pytest
from PIL import Image

from oracles import brute_consistent_attention
from poemseq.errors import ConfigurationError
from poemseq.generation import (
    BackendDescriptor,
    GenerationRequest,
    HttpImageBackend,
    ImageArtifact,
    ToyBackend,
    build_backend,
    generate_sequence,
    load_sequence,
    text_token_grid,
    toy_generate,
    upsample_nearest,
    write_sequence,
)
from poemseq.attention import SamplingPolicy
from poemseq.transport import Cassette, CassetteTransport
from toy_fixture import PROMPTS, mean_pairwise_cosine


def request(prompts, consistency=True, seed=0, size=(64, 64), style=""):
    return GenerationRequest("p", tuple((f"p#{k}", t) for k, t in enumerate(prompts)),
                             consistency=consistency, seed=seed, size=size, style_directives=style)


def png(width, height, rgb=(255, 0, 0)) -> str:
    buf = io.BytesIO()
    Image.new("RGB", (width, height), rgb).save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


class TestRequest:
    def test_empty_prompts(self):
        with pytest.raises(ValueError):
            GenerationRequest("p", ())

    def test_bad_size(self):
        with pytest.raises(ValueError):
            request(["x"], size=(0, 5))

    def test_style_directives(self):
        assert request(["a fox"], style="ink wash").prompt_texts() == ["a fox, ink wash"]

    def test_descriptor(self):
        with pytest.raises(ConfigurationError):
            BackendDescriptor(kind="magic")
        with pytest.raises(ConfigurationError):
            BackendDescriptor(kind="http")
        d = BackendDescriptor.from_dict({"kind": "toy", "options": {"rate": 0.25}})
        assert build_backend(d).rate == 0.25 and d.model_name == "toy-csa"


class TestToy:
    def test_shapes_and_meta(self):
        arts = generate_sequence(request(PROMPTS, size=(40, 24)), ToyBackend())
        assert [a.segment_id for a in arts] == ["p#0", "p#1", "p#2"]
        for a in arts:
            assert a.pixels.shape == (24, 40, 3) and a.pixels.dtype == np.uint8
            assert a.feature_map.shape == (64, 16)
            assert a.backend_meta["consistency"] is True and a.ok

    def test_deterministic(self):
        a = toy_generate(PROMPTS, seed=3)
        b = toy_generate(PROMPTS, seed=3)
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x.pixels, y.pixels)
            np.testing.assert_array_equal(x.feature_map, y.feature_map)

    def test_seed_matters(self):
        assert not np.array_equal(toy_generate(PROMPTS, 0)[0].pixels, toy_generate(PROMPTS, 1)[0].pixels)

    def test_prefix_stability(self):
        full = toy_generate(PROMPTS, seed=5)
        for k in range(1, 3):
            prefix = toy_generate(PROMPTS[:k], seed=5)
            for x, y in zip(prefix, full):
                np.testing.assert_array_equal(x.feature_map, y.feature_map)

    def test_single_prompt_same_with_or_without_consistency(self):
        on = toy_generate(PROMPTS[:1], seed=2, consistency=True)[0]
        off = toy_generate(PROMPTS[:1], seed=2, consistency=False)[0]
        np.testing.assert_array_equal(on.pixels, off.pixels)

    def test_empty_description(self):
        with pytest.raises(ValueError):
            ToyBackend().generate(request(["a fox", "  "]))
        with pytest.raises(ValueError):
            text_token_grid("!!!", 0)

    def test_identical_descriptions_all_other_pool(self):
        arts = toy_generate(["the old mill"] * 3, seed=4, policy=SamplingPolicy(rate=0.5, seed=4, pool="all-other-images"))
        for a in arts[1:]:
            np.testing.assert_array_equal(a.feature_map, arts[0].feature_map)
            np.testing.assert_array_equal(a.pixels, arts[0].pixels)

    def test_upsample(self):
        grid = np.arange(2 * 2 * 3, dtype=np.uint8).reshape(2, 2, 3)
        up = upsample_nearest(grid, 4, 2)
        assert up.shape == (2, 4, 3)
        np.testing.assert_array_equal(up[0, 1], grid[0, 0])
        np.testing.assert_array_equal(up[1, 3], grid[1, 1])

    def test_steps_against_reference(self):
        seed, texts = 7, PROMPTS
        words = [t.lower().replace(",", "").split() for t in texts]

        # step 1: word-hashed grids
        def word_grid(w):
            h = int.from_bytes(hashlib.blake2b(f"token-grid\x00{w}".encode(), digest_size=8).digest(), "little")
            return np.random.default_rng([h, seed]).standard_normal((64, 16))

        feats = [sum(word_grid(w) for w in ws) / np.sqrt(len(ws)) for ws in words]
        for f, t in zip(feats, texts):
            np.testing.assert_allclose(text_token_grid(t, seed), f, atol=1e-12)

        # step 2: two consistent layers, prior images only, 32 tokens per source
        for layer in range(2):
            rng = np.random.default_rng([seed, 1000 + layer])
            wq, wk, wv = (rng.standard_normal((16, 16)) / 4 for _ in range(3))
            picks = [[(j, int(t)) for r, j in enumerate(range(i))
                      for t in np.random.default_rng([seed, layer, r]).choice(64, 32, replace=False)]
                     for i in range(3)]
            feats = brute_consistent_attention([f.tolist() for f in feats], wq.tolist(), wk.tolist(), wv.tolist(), picks)
            feats = [np.array(f) for f in feats]

        arts = toy_generate(texts, seed)
        for a, f in zip(arts, feats):
            np.testing.assert_allclose(a.feature_map, f, atol=1e-9, rtol=0)

        # step 3: readout, quantization, upsampling
        readout = np.random.default_rng([seed, 2000]).standard_normal((16, 3)) / 4
        for a, f in zip(arts, feats):
            levels = np.clip(np.rint(128 + 96 * (f @ readout)), 0, 255).astype(np.uint8).reshape(8, 8, 3)
            np.testing.assert_array_equal(a.pixels, np.kron(levels, np.ones((8, 8, 1), dtype=np.uint8)))

    def test_consistency_raises_similarity(self):
        wins = 0
        for seed in range(20):
            on = mean_pairwise_cosine(a.feature_map for a in toy_generate(PROMPTS, seed, consistency=True))
            off = mean_pairwise_cosine(a.feature_map for a in toy_generate(PROMPTS, seed, consistency=False))
            wins += on > off
        assert wins == 20


class FakeServer:
    """MockTransport handler with a queue of status codes."""

    def __init__(self, statuses=(), size=(1, 1)):
        self.statuses = list(statuses)
        self.size = size
        self.requests = []

    def __call__(self, req: httpx.Request) -> httpx.Response:
        body = json.loads(req.content)
        self.requests.append(body)
        status = self.statuses.pop(0) if self.statuses else 200
        if status != 200:
            return httpx.Response(status, json={"error": "busy"})
        return httpx.Response(200, json={"image_b64": png(*self.size), "meta": {"sampler": "ddim"}})


def http_backend(handler, **options):
    desc = BackendDescriptor(kind="http", endpoint="http://img.test", model="m1",
                             options={"backoff": 0, **options})
    return HttpImageBackend(desc, httpx.MockTransport(handler))


class TestHttpBackend:
    def test_single_red_pixel(self):
        server = FakeServer()
        arts = http_backend(server).generate(request(["a red dot"], size=(1, 1)))
        np.testing.assert_array_equal(arts[0].pixels, [[[255, 0, 0]]])
        assert server.requests[0] == {"prompt": "a red dot", "seed": 0, "width": 1, "height": 1,
                                      "consistent": False, "reference_ids": [], "model": "m1"}
        assert arts[0].backend_meta["sampler"] == "ddim" and arts[0].backend_meta["retries"] == 0

    def test_retries_recorded(self):
        server = FakeServer([500, 500, 200])
        art = http_backend(server).generate(request(["x"], size=(1, 1)))[0]
        assert art.ok and art.backend_meta["retries"] == 2 and len(server.requests) == 3

    def test_retries_exhausted(self):
        art = http_backend(FakeServer([503] * 5)).generate(request(["x"], size=(1, 1)))[0]
        assert not art.ok and "3 attempts" in art.error

    def test_dimension_mismatch(self):
        art = http_backend(FakeServer(size=(2, 2))).generate(request(["x"], size=(1, 1)))[0]
        assert art.error and "expected 1x1" in art.error

    def test_failure_skips_later_consistent_segments(self):
        server = FakeServer([200, 400])
        arts = http_backend(server).generate(request(["a", "b", "c"], size=(1, 1)))
        assert arts[0].ok and "400" in arts[1].error and arts[2].error.startswith("skipped")
        assert len(server.requests) == 2
        assert server.requests[1]["consistent"] is True and server.requests[1]["reference_ids"] == ["p#0"]

    def test_failure_isolated_without_consistency(self):
        server = FakeServer([200, 400, 200])
        arts = http_backend(server).generate(request(["a", "b", "c"], consistency=False, size=(1, 1)))
        assert [a.ok for a in arts] == [True, False, True]

    def test_cassette_replay_identical(self, tmp_path):
        cassette = Cassette(path=tmp_path / "c.json")
        recorded = http_backend(CassetteTransport(cassette, httpx.MockTransport(FakeServer()), record=True).handle_request)
        first = recorded.generate(request(PROMPTS, size=(1, 1)))
        cassette.save()

        def offline(req):
            raise AssertionError("live call during replay")

        replay = http_backend(CassetteTransport(Cassette.load(tmp_path / "c.json"),
                                                httpx.MockTransport(offline)).handle_request)
        second = replay.generate(request(PROMPTS, size=(1, 1)))
        for a, b in zip(first, second):
            assert a.pixels.tobytes() == b.pixels.tobytes() and a.backend_meta == b.backend_meta

    def test_cassette_miss(self):
        backend = http_backend(CassetteTransport(Cassette()).handle_request, retries=0)
        art = backend.generate(request(["x"], size=(1, 1)))[0]
        assert not art.ok


class TestSequenceFiles:
    def test_round_trip(self, tmp_path):
        arts = toy_generate(PROMPTS, seed=1, size=(16, 16))
        arts.append(ImageArtifact("toy#3", description="lost", error="HTTP 500"))
        path = write_sequence(tmp_path, "poem-1", arts)
        doc = json.loads(path.read_text())
        assert doc["schema"] == "poemseq.sequence/v1"
        assert [e["file"] for e in doc["artifacts"]] == ["image_00.png", "image_01.png", "image_02.png", None]
        poem_id, loaded = load_sequence(tmp_path)
        assert poem_id == "poem-1"
        for a, b in zip(arts[:3], loaded):
            np.testing.assert_array_equal(a.pixels, b.pixels)
            assert a.description == b.description
        assert loaded[3].error == "HTTP 500" and loaded[3].pixels is None

    def test_rewrite_is_byte_identical(self, tmp_path):
        arts = toy_generate(PROMPTS, seed=1, size=(16, 16))
        write_sequence(tmp_path / "a", "p", arts)
        write_sequence(tmp_path / "b", "p", arts)
        for name in ("sequence.json", "image_00.png", "image_02.png"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
