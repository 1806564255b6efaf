from enum import StrEnum


class Mode(StrEnum):
    TRAIN = "train"
    INFER = "infer"


class GateGranularity(StrEnum):
    PER_INPUT_ROW = "per-input-row"
    PER_ELEMENT = "per-element"


class ModelKind(StrEnum):
    FCNN = "fcnn"
    SPARSE_FCNN = "sparse-fcnn"
    L0_SINDY = "l0-sindy"


class Target(StrEnum):
    TRANSITION = "transition"
    REWARD = "reward"


class LibraryKind(StrEnum):
    POLYNOMIAL = "polynomial"
    FOURIER = "fourier"
    GENERALIZED = "generalized"


class LibraryChoice(StrEnum):
    """Library presets exposed on the command line."""

    POLYNOMIAL = "polynomial"
    FOURIER = "fourier"
    POLYFOURIER = "polyfourier"
