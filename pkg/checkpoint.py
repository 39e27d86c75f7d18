"""
Checkpoint - NPN1 model container
Magic line b"NPN1\\n" followed by an npz archive of every array plus a JSON header
"""

import io
import json
import logging
import os
import zipfile
from typing import Any, Dict, List

import numpy as np

from gates import GateBank, GateKind
from plastic_net import GatedLayer, LayerKind, LossKind, PlasticModel
from tensor_core import ParamTensor
from utils.errors import ParseError

MAGIC = b"NPN1\n"
FORMAT_VERSION = 1

logger = logging.getLogger(__name__)


def _layer_header(layer: GatedLayer) -> Dict[str, Any]:
    header = {
        'kind': layer.kind.value,
        'name': layer.name,
        'activation': layer.activation,
        'stride': layer.stride,
        'pool': layer.pool,
        'has_weight': layer.weight is not None,
        'weight_frozen': bool(layer.weight is not None and layer.weight.frozen),
        'has_bias': layer.bias is not None,
        'bank': None,
    }
    if layer.bank is not None:
        bank = layer.bank
        header['bank'] = {
            'kind': bank.kind.value,
            'k': bank.k,
            'frozen': bank.frozen,
            'has_fixed_mask': bank.fixed_mask is not None,
            'rng_state': bank.rng_state(),
        }
    return header


def save_checkpoint(model: PlasticModel, path: str, extra: Dict[str, Any] = None) -> str:
    """
    Write a model (weights, logits, unit states, gate kind and k, RNG positions)

    Args:
        model: Plastic model
        path: Output file
        extra: JSON-serializable run information (epoch, stage, ...)

    Returns:
        str: The path written
    """
    arrays: Dict[str, np.ndarray] = {}
    for index, layer in enumerate(model.layers):
        if layer.weight is not None:
            arrays[f"l{index}.weight"] = layer.weight.data
        if layer.bias is not None:
            arrays[f"l{index}.bias"] = layer.bias.data
        if layer.bank is not None:
            arrays[f"l{index}.phi"] = layer.bank.phis.data
            arrays[f"l{index}.state"] = layer.bank.state
            if layer.bank.fixed_mask is not None:
                arrays[f"l{index}.fixed_mask"] = layer.bank.fixed_mask

    header = {
        'version': FORMAT_VERSION,
        'template': model.template_name,
        'loss': model.loss_kind.value,
        'metadata': model.metadata,
        'layers': [_layer_header(layer) for layer in model.layers],
        'extra': extra or {},
    }
    arrays['header'] = np.array(json.dumps(header))

    buffer = io.BytesIO()
    np.savez(buffer, **arrays)
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, 'wb') as f:
        f.write(MAGIC)
        f.write(buffer.getvalue())
    logger.debug(f"Checkpoint written: {path}")
    return path


def read_checkpoint(path: str) -> Dict[str, Any]:
    """
    Raw header and arrays of an NPN1 file

    Args:
        path: Checkpoint file

    Returns:
        Dict with 'header' (parsed JSON) and 'arrays' (name -> np.ndarray)
    """
    with open(path, 'rb') as f:
        blob = f.read()
    if not blob.startswith(MAGIC):
        raise ParseError(f"{path} is not an NPN1 checkpoint", offset=0)
    try:
        with np.load(io.BytesIO(blob[len(MAGIC):]), allow_pickle=False) as archive:
            arrays = {name: archive[name] for name in archive.files}
    except (ValueError, OSError, EOFError, KeyError, zipfile.BadZipFile) as e:
        raise ParseError(f"{path}: corrupt checkpoint body ({e})", offset=len(MAGIC)) from e
    if 'header' not in arrays:
        raise ParseError(f"{path}: checkpoint has no header", offset=len(MAGIC))
    header = json.loads(str(arrays.pop('header')))
    if header.get('version') != FORMAT_VERSION:
        raise ParseError(f"{path}: unsupported checkpoint version {header.get('version')}",
                         offset=len(MAGIC))
    return {'header': header, 'arrays': arrays}


def load_checkpoint(path: str) -> PlasticModel:
    """
    Rebuild a PlasticModel from an NPN1 file

    Args:
        path: Checkpoint file

    Returns:
        PlasticModel: Model with restored gates and RNG positions
    """
    raw = read_checkpoint(path)
    header, arrays = raw['header'], raw['arrays']

    layers: List[GatedLayer] = []
    for index, spec in enumerate(header['layers']):
        weight = bias = bank = None
        if spec['has_weight']:
            weight = ParamTensor(arrays[f"l{index}.weight"], name=f"{spec['name']}.weight",
                                 frozen=spec['weight_frozen'])
        if spec['has_bias']:
            bias = ParamTensor(arrays[f"l{index}.bias"], name=f"{spec['name']}.bias")
        if spec['bank'] is not None:
            info = spec['bank']
            bank = GateBank(phis=ParamTensor(arrays[f"l{index}.phi"], name=f"{spec['name']}.phi"),
                            kind=GateKind.parse(info['kind']),
                            k=float(info['k']),
                            state=arrays[f"l{index}.state"].astype(np.int8),
                            rng=np.random.default_rng(),
                            name=spec['name'])
            bank.set_rng_state(info['rng_state'])
            if info['frozen']:
                bank.freeze(arrays[f"l{index}.fixed_mask"])
        layers.append(GatedLayer(LayerKind(spec['kind']), weight=weight, bias=bias, bank=bank,
                                 activation=spec['activation'], stride=spec['stride'],
                                 pool=spec['pool'], name=spec['name']))

    model = PlasticModel(layers, loss_kind=LossKind(header['loss']),
                         template_name=header['template'], metadata=header.get('metadata', {}))
    logger.debug(f"Checkpoint loaded: {path}")
    return model
