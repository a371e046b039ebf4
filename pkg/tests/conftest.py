import pytest

from ftddm.phantom import generate_dataset, load_dataset

TINY_DENOISER = dict(channels=(8, 8), blocks_per_stage=1, attention_resolutions=(8,), attention_heads=2,
                     time_embed_dim=8, embed_width=16)
TINY_FLOW = dict(scales=2, steps_per_scale=1, hidden=8, cond_channels=4)


@pytest.fixture(scope="session")
def tiny_data_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    generate_dataset(root, 5, seed=7, n_slices=2, size=32)
    return root


@pytest.fixture(scope="session")
def tiny_dataset(tiny_data_dir):
    return load_dataset(tiny_data_dir)


def pytest_terminal_summary(terminalreporter):
    from acceptance_protocol import RESULTS
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(RESULTS):
        passed, detail = RESULTS[number]
        terminalreporter.write_line(f"ACCEPTANCE {number:2d} {'PASS' if passed else 'FAIL'}: {detail}")
