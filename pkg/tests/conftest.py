import numpy as np
import pytest

from evfield.events import EventStream
from evfield.kinematics import Camera, load_model
from evfield.synth import JointMotion, MotionScript, bar_script, generate
from evfield.templates import make_bar


def random_stream(rng, n=200, width=32, height=24, t_max=10_000):
    t = np.sort(rng.integers(0, t_max, n))
    return EventStream.from_arrays(t, rng.integers(0, width, n), rng.integers(0, height, n),
                                   rng.choice([-1, 1], n), width, height)


def chain_script(cam=None, duration=1.0, alpha=np.pi):
    """6-joint chain whose second joint swings 90 degrees with constant angular acceleration."""
    return MotionScript(duration, 6, {1: JointMotion("quadratic", (0, 0, 1), alpha=alpha)},
                        root_start=(-0.5, 0.0, 3.0), camera=cam or Camera.default())


@pytest.fixture(scope="session")
def cam():
    return Camera.default()


@pytest.fixture(scope="session")
def bar():
    return make_bar()


@pytest.fixture(scope="session")
def chain6():
    return load_model("chain6")


@pytest.fixture(scope="session")
def bar_scene(bar, cam):
    """Bar translating (3, -2) px per 10 ms window over four windows."""
    return generate(bar, cam, bar_script((3.0, -2.0), 4, 0.01, 2.0, cam))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
