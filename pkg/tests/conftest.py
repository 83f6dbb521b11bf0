import numpy as np
import pytest

from evovision.genotype import (Genome, MorphologicalGenes, NeuralGenes, OpticalGenes)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """Echo the acceptance criteria verdicts at the end of every run."""
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def small_genome():
    """2 forward eyes, 5x5, pinhole rendering; cheap enough for training tests."""
    return Genome(
        morphological=MorphologicalGenes(num_eyes=2, placement_range=30.0, fov=45.0,
                                         resolution_w=5, resolution_h=5),
        optical=OpticalGenes(enabled=False),
        neural=NeuralGenes(memory_frames=1, hidden_neurons=16),
    )


@pytest.fixture
def optics_genome():
    """2 eyes, 11x11, wave optics enabled at mid aperture."""
    return Genome(
        morphological=MorphologicalGenes(num_eyes=2, placement_range=30.0, fov=45.0,
                                         resolution_w=11, resolution_h=11),
        optical=OpticalGenes(enabled=True, aperture_fraction=0.5),
        neural=NeuralGenes(memory_frames=1, hidden_neurons=16),
    )
