# Binary checkpoint: a fixed header, a JSON description, then length-prefixed
# little-endian float64 arrays in the order the JSON lists them.
#
#   magic(8s) version(I) json_length(I) json  [byte_length(I) data]...

import json, logging, os, struct, tempfile
from collections import OrderedDict

import numpy as np

from emorag.config import RunConfig
from emorag.errors import CheckpointError, ConfigError
from emorag.pipeline.agents import PolicyBundle, init_bundle

logger = logging.getLogger(__name__)

MAGIC = b"EMORAGCK"
VERSION = 1

_HEADER_FORMAT = "<8sII"
_HEADER_LENGTH = struct.calcsize(_HEADER_FORMAT)
_ARRAY_FORMAT = "<I"
_ARRAY_LENGTH = struct.calcsize(_ARRAY_FORMAT)

TRAIN_SECTIONS = ("trunk", "heads", "critic", "sft", "raaf", "moe", "optim")
EVAL_SECTIONS = ("trunk", "heads", "raaf", "moe")


def bundle_sections(bundle: PolicyBundle, optimizer=None):
    sections = OrderedDict()
    sections["trunk"] = OrderedDict(bundle.actor.trunk.named_parameters())
    heads = OrderedDict()
    for head in bundle.actor.heads:
        heads.update(head.named_parameters())
    sections["heads"] = heads
    sections["critic"] = OrderedDict(bundle.critic.named_parameters())
    if bundle.sft is not None:
        sections["sft"] = OrderedDict(bundle.sft.named_parameters())
    sections["raaf"] = OrderedDict(bundle.raaf.named_parameters())
    sections["moe"] = OrderedDict(bundle.moe.named_parameters())
    if optimizer is not None:
        sections["optim"] = OrderedDict((f"velocity.{k}", v) for k, v in optimizer.state_dict()["velocity"].items())
    return sections


def wrap_array(array):
    data = np.ascontiguousarray(array, dtype="<f8").tobytes()
    return struct.pack(_ARRAY_FORMAT, len(data)) + data


def unwrap_array(stream, shape):
    prefix = stream.read(_ARRAY_LENGTH)
    if len(prefix) != _ARRAY_LENGTH:
        raise CheckpointError("checkpoint ends before an array length")
    (length,) = struct.unpack(_ARRAY_FORMAT, prefix)
    data = stream.read(length)
    if len(data) != length:
        raise CheckpointError(f"checkpoint array truncated: expected {length} bytes, got {len(data)}")
    count = int(np.prod(shape)) if shape else 1
    if length != 8 * count:
        raise CheckpointError(f"array of shape {shape} stored with {length} bytes")
    return np.frombuffer(data, dtype="<f8").astype(np.float64).reshape(shape)


def save_checkpoint(path, bundle: PolicyBundle, config: RunConfig, mode="train", optimizer=None, extra=None):
    if mode not in ("train", "eval"):
        raise ValueError(f"unknown checkpoint mode '{mode}'")
    wanted = TRAIN_SECTIONS if mode == "train" else EVAL_SECTIONS
    sections = OrderedDict(
        (name, arrays) for name, arrays in bundle_sections(bundle, optimizer).items() if name in wanted
    )

    header = {
        "version": VERSION,
        "mode": mode,
        "config": config.to_dict(),
        "config_hash": config.config_hash(),
        "optim_steps": optimizer.state_dict()["steps"] if optimizer is not None and mode == "train" else 0,
        "extra": extra or {},
        "sections": [
            {"name": name, "arrays": [{"name": k, "shape": list(v.shape)} for k, v in arrays.items()]}
            for name, arrays in sections.items()
        ],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")

    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".ckpt-")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(struct.pack(_HEADER_FORMAT, MAGIC, VERSION, len(blob)))
            f.write(blob)
            for arrays in sections.values():
                for array in arrays.values():
                    f.write(wrap_array(array))
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    logger.debug(f"Wrote {mode} checkpoint {path} with sections {list(sections)}")


def read_checkpoint(path):
    """(header, {section: {name: array}}) without building a bundle."""
    try:
        stream = open(path, "rb")
    except OSError as e:
        raise CheckpointError(f"cannot open checkpoint {path}: {e}") from e

    with stream:
        prefix = stream.read(_HEADER_LENGTH)
        if len(prefix) != _HEADER_LENGTH:
            raise CheckpointError(f"{path} is too short to be a checkpoint")
        magic, version, length = struct.unpack(_HEADER_FORMAT, prefix)
        if magic != MAGIC:
            raise CheckpointError(f"{path} is not a checkpoint file")
        if version != VERSION:
            raise CheckpointError(f"checkpoint version {version} is not supported (expected {VERSION})")
        try:
            header = json.loads(stream.read(length).decode("utf-8"))
        except ValueError as e:
            raise CheckpointError(f"checkpoint header is not valid JSON: {e}") from e

        sections = OrderedDict()
        for section in header["sections"]:
            arrays = OrderedDict()
            for entry in section["arrays"]:
                arrays[entry["name"]] = unwrap_array(stream, tuple(entry["shape"]))
            sections[section["name"]] = arrays
    return header, sections


def _assign(section, targets, stored):
    for name, target in targets.items():
        if name not in stored:
            raise CheckpointError(f"section '{section}' is missing array '{name}'", section=section)
        value = stored[name]
        if value.shape != target.shape:
            raise CheckpointError(
                f"section '{section}' array '{name}' has shape {value.shape}, expected {target.shape}",
                section=section,
            )
        target[...] = value
    extra = sorted(set(stored) - set(targets))
    if extra:
        raise CheckpointError(f"section '{section}' has unexpected arrays {extra}", section=section)


def load_checkpoint(path, config: RunConfig = None):
    """(bundle, config, header, optimizer_state).

    Without `config` the configuration stored in the checkpoint is used. The
    optimizer state is None for eval checkpoints.
    """
    header, sections = read_checkpoint(path)
    if config is None:
        try:
            config = RunConfig.from_dict(header["config"])
        except ConfigError as e:
            raise CheckpointError(f"checkpoint carries an invalid config: {e}") from e

    bundle = init_bundle(config)
    targets = bundle_sections(bundle)
    for name in ("trunk", "heads", "raaf", "moe"):
        if name not in sections:
            raise CheckpointError(f"checkpoint has no '{name}' section", section=name)
    for name, arrays in targets.items():
        if name in sections:
            _assign(name, arrays, sections[name])

    if "sft" not in sections:
        bundle.freeze_reference()

    optim = None
    if "optim" in sections:
        velocity = {k[len("velocity."):]: v for k, v in sections["optim"].items()}
        optim = {"steps": header.get("optim_steps", 0), "velocity": velocity}
    return bundle, config, header, optim
