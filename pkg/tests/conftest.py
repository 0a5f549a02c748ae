import pytest
import torch

from tomebind.adapters import StubAdapter
from tomebind.encoders import StubTextEncoder
from tomebind.parsing import RuleParseProvider, parse_prompt

PROMPT = "a cat wearing sunglasses and a dog wearing hat"


@pytest.fixture(scope="session")
def encoder():
    return StubTextEncoder(dtype=torch.float64)


@pytest.fixture(scope="session")
def adapter(encoder):
    return StubAdapter(cond_dim=encoder.dim, latent_size=16, dtype=torch.float64)


@pytest.fixture(scope="session")
def small_adapter(encoder):
    # every probed map is at most 8x8
    layout = [("down.0", 4), ("up.0", 8), ("up.1", 8), ("up.2", 4)]
    return StubAdapter(cond_dim=encoder.dim, latent_size=8, layout=layout, dtype=torch.float64)


@pytest.fixture(scope="session")
def provider():
    return RuleParseProvider()


@pytest.fixture(scope="session")
def parsed():
    return parse_prompt(PROMPT)


def tiny_sdxl_pipeline():
    """A randomly initialised, very small SDXL pipeline; no downloads."""
    import json
    import os
    import tempfile

    diffusers = pytest.importorskip("diffusers")
    transformers = pytest.importorskip("transformers")
    from open_clip.tokenizer import SimpleTokenizer

    torch.manual_seed(0)
    unet = diffusers.UNet2DConditionModel(
        block_out_channels=(32, 64), layers_per_block=1, sample_size=16, in_channels=4, out_channels=4,
        down_block_types=("DownBlock2D", "CrossAttnDownBlock2D"), up_block_types=("CrossAttnUpBlock2D", "UpBlock2D"),
        attention_head_dim=(2, 4), use_linear_projection=True, addition_embed_type="text_time",
        addition_time_embed_dim=8, transformer_layers_per_block=(1, 2), projection_class_embeddings_input_dim=80,
        cross_attention_dim=64, norm_num_groups=8,
    )
    vae = diffusers.AutoencoderKL(
        block_out_channels=[8, 16], in_channels=3, out_channels=3, down_block_types=["DownEncoderBlock2D"] * 2,
        up_block_types=["UpDecoderBlock2D"] * 2, latent_channels=4, norm_num_groups=8, sample_size=32,
    )
    cfg = dict(bos_token_id=49406, eos_token_id=49407, hidden_size=32, intermediate_size=37, layer_norm_eps=1e-5,
               num_attention_heads=4, num_hidden_layers=5, pad_token_id=49407, vocab_size=49408,
               hidden_act="gelu", projection_dim=32)
    te = transformers.CLIPTextModel(transformers.CLIPTextConfig(**cfg))
    te2 = transformers.CLIPTextModelWithProjection(transformers.CLIPTextConfig(**cfg))

    st = SimpleTokenizer()
    d = tempfile.mkdtemp()
    with open(os.path.join(d, "vocab.json"), "w") as fh:
        json.dump(st.encoder, fh)
    merges = sorted(st.bpe_ranks.items(), key=lambda kv: kv[1])
    with open(os.path.join(d, "merges.txt"), "w") as fh:
        fh.write("#version: 0.2\n" + "\n".join(" ".join(k) for k, _ in merges))
    special = dict(bos_token="<start_of_text>", eos_token="<end_of_text>", pad_token="<end_of_text>",
                   unk_token="<end_of_text>", model_max_length=77)
    tok = transformers.CLIPTokenizer(os.path.join(d, "vocab.json"), os.path.join(d, "merges.txt"), **special)
    sched = diffusers.EulerDiscreteScheduler(beta_start=0.00085, beta_end=0.012, beta_schedule="scaled_linear",
                                             timestep_spacing="leading", steps_offset=1)
    pipe = diffusers.StableDiffusionXLPipeline(vae=vae, text_encoder=te, text_encoder_2=te2, tokenizer=tok,
                                               tokenizer_2=tok, unet=unet, scheduler=sched)
    pipe.set_progress_bar_config(disable=True)
    return pipe


# acceptance reporting: one PASS/FAIL line per criterion at the end of the run
_CRITERIA: dict[int, tuple[str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    num, title = mark.args
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        status = "SKIP" if rep.skipped else ("PASS" if rep.passed else "FAIL")
        _CRITERIA[num] = (status, title)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(_CRITERIA):
        status, title = _CRITERIA[num]
        terminalreporter.write_line(f"criterion {num:>2}: {status}  {title}")
