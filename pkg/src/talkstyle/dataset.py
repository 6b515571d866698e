"""Load an exported corpus manifest into labeled training samples."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

from .audio import FeatureSequence, load_features
from .mesh import MeshSequence, TemplateMesh, load_msq, load_template, to_displacements
from .optimization import TrainingSample
from .supervision import PhonemeTiming, label_sequence, load_timings, load_weights


@dataclass
class CorpusItem:
    id: str
    speaker: str
    identity: int | None
    split: str
    mesh: MeshSequence
    features: FeatureSequence
    timings: PhonemeTiming
    template: TemplateMesh
    closure_frames: list

    def sample(self, weights=None, **label_kw) -> TrainingSample:
        """Training sample labeled automatically from the mesh and timings (or with given weights)."""
        if weights is None:
            _, weights = label_sequence(self.mesh, self.template, self.timings, **label_kw)
        if self.identity is None:
            raise ValueError(f"sequence {self.id} belongs to a held-out speaker without a training identity")
        return TrainingSample(self.id, self.features, to_displacements(self.mesh, self.template), weights,
                              self.identity, self.template.lip_region)


def read_manifest(path) -> dict:
    with open(path) as fh:
        return json.load(fh)


def load_corpus(path, splits=None) -> list:
    """All sequences of a manifest (optionally only some splits), in manifest order."""
    path = Path(path)
    root = path.parent
    manifest = read_manifest(path)
    templates = {}
    items = []
    for e in manifest["sequences"]:
        if splits is not None and e["split"] not in splits:
            continue
        tname = e["template"]
        if tname not in templates:
            templates[tname] = load_template(root / tname)
        items.append(CorpusItem(
            id=e["id"],
            speaker=e["speaker"],
            identity=e["identity"],
            split=e["split"],
            mesh=load_msq(root / e["mesh"]),
            features=load_features(root / e["features"]),
            timings=load_timings(root / e["timings"]),
            template=templates[tname],
            closure_frames=list(e.get("closure_frames", [])),
        ))
    return items


def samples_for(items, split: str, weights_dir=None, **label_kw) -> list:
    """Training samples of one split; weights come from ``<id>.w`` files in ``weights_dir`` if given."""
    out = []
    for it in items:
        if it.split != split:
            continue
        w = load_weights(Path(weights_dir) / f"{it.id}.w") if weights_dir is not None else None
        out.append(it.sample(w, **label_kw))
    return out
