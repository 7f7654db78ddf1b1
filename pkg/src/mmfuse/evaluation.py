"""Evaluation scenarios and the fuser/abstractor modality-awareness probe."""

from dataclasses import dataclass, field

import numpy as np
from sklearn.decomposition import PCA
from sklearn.linear_model import LogisticRegression

from .dropout import mask_to_modalities
from .metrics import MetricReport, best_jaccard_index, coco_ap, log_average_miss_rate
from .types import ConfigurationError, Modality

import json


@dataclass(frozen=True)
class Scenario:
    """Unimodal (one modality kept, the rest zeroed and invalidated) or multi-modal."""

    kind: str  # "unimodal" | "multimodal"
    modality: Modality | None = None

    def __post_init__(self):
        if self.kind not in ("unimodal", "multimodal"):
            raise ConfigurationError(f"unknown scenario kind {self.kind!r}")
        if self.kind == "unimodal" and self.modality is None:
            raise ConfigurationError("unimodal scenario needs a modality")

    @classmethod
    def parse(cls, text: str) -> "Scenario":
        if text == "multimodal":
            return cls("multimodal")
        if text.startswith("unimodal:"):
            return cls("unimodal", Modality.from_name(text.split(":", 1)[1]))
        raise ConfigurationError(
            f"bad scenario {text!r}; expected 'multimodal' or 'unimodal:<modality>'"
        )


def _dataset_group(sample_id: str) -> str:
    return sample_id.split("/", 1)[0] if "/" in sample_id else "default"


def scenario_view(sample, scenario: Scenario):
    if scenario.kind == "multimodal":
        return sample
    m = scenario.modality
    if m not in sample.planes or not sample.valid[m]:
        raise ConfigurationError(
            f"modality {m.name} absent from sample {sample.sample_id}"
        )
    return mask_to_modalities(sample, {m})


def evaluate_scenario(model, dataset, scenario: Scenario) -> MetricReport:
    """Run detection under a scenario and score with the full metric suite.

    ``model`` only needs a ``detect(sample) -> DetectionSet`` method.
    Deterministic: two runs on the same model and data produce equal reports.
    """
    dets, gts, groups = [], [], []
    for sample in dataset:
        view = scenario_view(sample, scenario)
        dets.append(model.detect(view))
        gts.append(list(sample.annotations))
        groups.append(_dataset_group(sample.sample_id))

    def metrics_for(indices) -> dict[str, float]:
        d = [dets[i] for i in indices]
        g = [gts[i] for i in indices]
        ap, ap50 = coco_ap(d, g)
        return {
            "ap": ap,
            "ap50": ap50,
            "mr2": log_average_miss_rate(d, g),
            "ji": best_jaccard_index(d, g),
        }

    overall = metrics_for(range(len(dets)))
    per_dataset = {}
    for name in sorted(set(groups)):
        per_dataset[name] = metrics_for([i for i, gname in enumerate(groups) if gname == name])
    return MetricReport(
        ap=overall["ap"],
        ap50=overall["ap50"],
        mr2=overall["mr2"],
        ji=overall["ji"],
        per_dataset=per_dataset,
    )


@dataclass
class ProbeReport:
    """Held-out linear-probe accuracy of modality-combination prediction."""

    combinations: list[str]
    maf_accuracy: list[float]  # per stage
    maa_accuracy: list[float]  # per stage
    chance: float
    n_train: int
    n_test: int
    embedding: list[tuple] = field(default_factory=list)  # (sample_id, combo, x, y)

    def to_dict(self) -> dict:
        return {
            "combinations": self.combinations,
            "maf_accuracy": self.maf_accuracy,
            "maa_accuracy": self.maa_accuracy,
            "chance": self.chance,
            "n_train": self.n_train,
            "n_test": self.n_test,
        }

    def to_json(self, **kwargs) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, **kwargs)


def combination_id(sample) -> str:
    return "+".join(m.name for m in sample.valid_modalities())


def extract_token_features(model, dataset):
    """Post-block fuser/abstractor features per stage for every sample."""
    maf, maa, labels, ids = [], [], [], []
    for sample in dataset:
        _, records = model.encode(sample, return_stage_records=True)
        maf.append([r["maf"].detach().cpu().numpy() for r in records])
        maa.append([r["maa"].detach().cpu().numpy() for r in records])
        labels.append(combination_id(sample))
        ids.append(sample.sample_id)
    n_stages = len(maf[0])
    maf_by_stage = [np.stack([f[s] for f in maf]) for s in range(n_stages)]
    maa_by_stage = [np.stack([f[s] for f in maa]) for s in range(n_stages)]
    return maf_by_stage, maa_by_stage, np.array(labels), ids


def linear_probe_accuracy(
    features: np.ndarray,
    labels: np.ndarray,
    train_frac: float = 0.7,
    seed: int = 0,
    permute_labels: bool = False,
) -> float:
    """Fit a linear classifier on a split and report held-out accuracy.

    With ``permute_labels`` the label column is shuffled first, which should
    drive accuracy to chance; this is the probe's null control.
    """
    rng = np.random.default_rng(seed)
    labels = np.asarray(labels)
    if permute_labels:
        labels = labels[rng.permutation(len(labels))]
    order = rng.permutation(len(labels))
    n_train = int(round(train_frac * len(labels)))
    train, test = order[:n_train], order[n_train:]
    if len(test) == 0 or len(np.unique(labels[train])) < 2:
        raise ConfigurationError("probe split too small or single-class")
    clf = LogisticRegression(max_iter=2000, C=1.0, random_state=0)
    clf.fit(features[train], labels[train])
    return float((clf.predict(features[test]) == labels[test]).mean())


def token_probe(model, dataset, train_frac: float = 0.7, seed: int = 0) -> ProbeReport:
    """Per-stage linear separability of the modality combination from the
    fuser and abstractor features, plus a 2D embedding for plotting."""
    maf_by_stage, maa_by_stage, labels, ids = extract_token_features(model, dataset)
    combos = sorted(set(labels.tolist()))
    if len(combos) < 2:
        raise ConfigurationError(
            "token probe needs at least 2 modality combinations in the dataset"
        )
    maf_acc = [
        linear_probe_accuracy(f, labels, train_frac, seed) for f in maf_by_stage
    ]
    maa_acc = [
        linear_probe_accuracy(f, labels, train_frac, seed) for f in maa_by_stage
    ]
    final = maf_by_stage[-1]
    coords = PCA(n_components=2, random_state=0).fit_transform(final)
    embedding = [
        (ids[i], labels[i], float(coords[i, 0]), float(coords[i, 1]))
        for i in range(len(ids))
    ]
    n_train = int(round(train_frac * len(labels)))
    return ProbeReport(
        combinations=combos,
        maf_accuracy=maf_acc,
        maa_accuracy=maa_acc,
        chance=1.0 / len(combos),
        n_train=n_train,
        n_test=len(labels) - n_train,
        embedding=embedding,
    )


def write_embedding_csv(report: ProbeReport, path) -> None:
    with open(path, "w") as fh:
        fh.write("sample_id,combination_id,x,y\n")
        for sid, combo, x, y in report.embedding:
            fh.write(f"{sid},{combo},{x!r},{y!r}\n")
