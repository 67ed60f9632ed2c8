"""Pipeline stages behind the command-line interface.

Each stage derives a stage hash from the configuration fields it consumes and
the stage hashes of its inputs. Outputs record that hash plus their upstream
references, so reruns can be skipped and stale inputs are caught on load.
"""
import copy
import json
from itertools import combinations

import numpy as np
import torch

from .attacks.crafting import ADAPTIVE, AttackSpec, craft_dataset, load_adversarial_set, save_adversarial_set
from .classifiers import ClassifierSpec, accuracy, build_classifier, plan_taps, train_classifier
from .data import NUM_CLASSES, load_splits
from .detector import build_detector, load_detector, param_count, save_detector
from .errors import ConfigError, FeatsentError, MissingArtifactError, ProvenanceError
from .evaluation import (
    balanced_test_set,
    evaluate_detector,
    export_words,
    generalization_matrix,
    report_from_scores,
    separability_report,
)
from .serialization import load_module_state, read_manifest, save_module
from .store import read_json, write_json
from .training import DetectorDataset, TrainRecipe, assemble, compute_maps, fine_tune, score, train
from .utils import batches, hash_module, hash_obj, logger

COMMANDS = (
    "train-classifier",
    "craft",
    "train-detector",
    "evaluate",
    "generalize",
    "diagnose",
    "adaptive-eval",
    "ablate",
    "verify",
)


def _up(store, path):
    return {"path": str(path.relative_to(store.run)), "stage_hash": store.stage_hash(path)}


def clip_grams(gram_set, L):
    """Drop n-gram sizes longer than the sentence; a sentence always keeps 1-grams."""
    kept = [n for n in gram_set if n <= L]
    return kept or [1]


class Pipeline:
    def __init__(self, cfg, store, force=False):
        self.cfg = cfg
        self.store = store
        self.force = force
        self._splits = None
        self._classifier = None

    # ---- shared inputs

    @property
    def splits(self):
        if self._splits is None:
            d = self.cfg.dataset
            self._splits = load_splits(d.name, d.root, d.subset, self.cfg.seed_for("data"), d.val, d.test)
        return self._splits

    def n_craft(self):
        n = self.cfg.trainer.craft_train
        half = len(self.splits.train) // 2
        return half if n is None else min(n, half)

    def detector_attacks(self):
        return [a for a in self.cfg.attacks if a.attack not in ADAPTIVE]

    def spec(self, name):
        return self.cfg.attack(name).spec(self.cfg.seed_for(f"attack/{name}"))

    # ---- stage hashes

    def h_classifier(self):
        c = self.cfg
        return hash_obj({"dataset": c.dataset.model_dump(), "classifier": c.classifier.model_dump(), "seed": c.seed})

    def h_craft(self, name):
        return hash_obj({"up": self.h_classifier(), "spec": self.spec(name).to_dict(), "n": self.cfg.trainer.craft_train})

    def h_detector(self, name):
        c = self.cfg
        return hash_obj(
            {
                "up": self.h_craft(name),
                "taps": c.taps,
                "detector": c.detector.model_dump(),
                "trainer": c.trainer.model_dump(),
                "seed": c.seed,
            }
        )

    def h_report(self, kind, *parts):
        return hash_obj({"kind": kind, "parts": list(parts), "evaluation": self.cfg.evaluation.model_dump()})

    # ---- artifacts

    def classifier_dir(self):
        return self.store.checkpoint("classifier")

    def classifier(self):
        if self._classifier is None:
            path = self.store.require(self.classifier_dir(), self.h_classifier(), "train-classifier")
            manifest = read_manifest(path)
            clf = build_classifier(ClassifierSpec.from_dict(manifest["spec"]))
            load_module_state(clf, path)
            clf.eval()
            if hash_module(clf) != manifest["classifier_hash"]:
                raise ProvenanceError(f"classifier weights in {path} do not match their recorded hash")
            self._classifier = (clf, manifest["classifier_hash"])
        return self._classifier

    def adv_set(self, name, split):
        path = self.store.adv_cache(name, split)
        self.store.require(path, self.h_craft(name), "craft")
        adv = load_adversarial_set(path)
        adv.check_classifier(self.classifier()[1])
        return adv

    def detector_dir(self, name):
        return self.store.checkpoint(f"detector_{name}")

    def detector(self, name):
        path = self.store.require(self.detector_dir(name), self.h_detector(name), "train-detector")
        return load_detector(path)[0]

    def benign_pool(self):
        k = self.n_craft()
        tr = self.splits.train
        return tr.images[k : 2 * k], tr.labels[k : 2 * k]

    # ---- commands

    def train_classifier(self):
        c = self.cfg
        path = self.classifier_dir()
        h = self.h_classifier()
        if self.store.is_current(path, h, self.force):
            logger.info("classifier up to date at %s", path)
            return read_json(self.store.report("classifier.json"))
        sp = self.splits
        spec = ClassifierSpec(c.classifier.architecture, NUM_CLASSES[c.dataset.name], tuple(sp.train.images.shape[1:]))
        seed = c.seed_for("classifier")
        clf = build_classifier(spec, seed)
        k = c.classifier
        clf, history = train_classifier(clf, sp.train, k.epochs, k.lr, seed, sp.val, k.batch_size, k.weight_decay)
        clf.eval()
        chash = hash_module(clf)
        save_module(
            clf,
            path,
            {
                "kind": "classifier",
                "spec": spec.to_dict(),
                "classifier_hash": chash,
                "stage_hash": h,
                "config_hash": c.hash(),
                "data_fingerprint": sp.train.fingerprint(),
                "history": history,
            },
        )
        report = {
            "stage_hash": hash_obj({"classifier": h}),
            "upstream": [_up(self.store, path)],
            "classifier_hash": chash,
            "val_accuracy": accuracy(clf, sp.val),
            "test_accuracy": accuracy(clf, sp.test),
            "train_size": len(sp.train),
            "dataset": sp.train.name,
        }
        write_json(self.store.report("classifier.json"), report)
        self._classifier = (clf, chash)
        print(f"classifier val_accuracy={report['val_accuracy']:.4f} test_accuracy={report['test_accuracy']:.4f}")
        return report

    def craft(self, names=None):
        clf, chash = self.classifier()
        out = {}
        k = self.n_craft()
        tr, te = self.splits.train, self.splits.test
        for a in self.detector_attacks():
            if names and a.name not in names:
                continue
            spec = self.spec(a.name)
            h = self.h_craft(a.name)
            for split, images, labels, src in (
                ("train", tr.images[:k], tr.labels[:k], np.arange(k)),
                ("test", te.images, te.labels, np.arange(len(te))),
            ):
                path = self.store.adv_cache(a.name, split)
                if self.store.is_current(path, h, self.force):
                    out[(a.name, split)] = read_manifest(path)["success_rate"]
                    continue
                adv = craft_dataset(clf, spec, images, labels, classifier_hash=chash, source_index=src)
                save_adversarial_set(
                    adv,
                    path,
                    {"stage_hash": h, "config_hash": self.cfg.hash(), "split": split,
                     "upstream": [_up(self.store, self.classifier_dir())]},
                )
                out[(a.name, split)] = adv.success_rate
                print(f"craft {a.name}/{split} success_rate={adv.success_rate:.4f}")
        for a in self.cfg.attacks:
            if a.attack in ADAPTIVE:
                logger.info("%s needs a trained detector; crafted by adaptive-eval", a.name)
        return out

    def _recipe(self, label, epochs=None):
        t = self.cfg.trainer
        return TrainRecipe(epochs or t.epochs, t.lr, t.batch_size, self.cfg.seed_for(label))

    def train_detector(self, names=None):
        c = self.cfg
        clf, chash = self.classifier()
        plan = plan_taps(clf, c.taps)
        bx, by = self.benign_pool()
        out = {}
        for a in self.detector_attacks():
            if names and a.name not in names:
                continue
            path = self.detector_dir(a.name)
            h = self.h_detector(a.name)
            if self.store.is_current(path, h, self.force):
                out[a.name] = read_manifest(path)["meta"]["history"]
                continue
            adv = self.adv_set(a.name, "train")
            seed = c.seed_for(f"detector/{a.name}")
            det = build_detector(plan, c.detector.gram_set, c.detector.instances_per_gram, c.detector.dropout_rate, seed)
            ds = assemble(clf, plan, bx, adv, c.trainer.balance, by, chash, c.trainer.val_fraction, seed, c.trainer.cache)
            det, history = train(det, ds, self._recipe(f"trainer/{a.name}"))
            save_detector(
                det,
                path,
                {"stage_hash": h, "config_hash": c.hash(), "classifier_hash": chash, "attack": a.name,
                 "param_count": param_count(det),
                 "upstream": [_up(self.store, self.classifier_dir()), _up(self.store, self.store.adv_cache(a.name, "train"))]},
            )
            hist_path = self.store.report(f"history_{a.name}.jsonl")
            hist_path.parent.mkdir(parents=True, exist_ok=True)
            hist_path.write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in history))
            out[a.name] = history
            print(f"train-detector {a.name} final_loss={history[-1]['loss']:.4f}")
        return out

    def evaluate(self, names=None):
        clf, chash = self.classifier()
        te = self.splits.test
        out = {}
        for a in self.detector_attacks():
            if names and a.name not in names:
                continue
            path = self.store.report(f"eval_{a.name}.json")
            h = self.h_report("evaluate", self.h_detector(a.name))
            if self.store.is_current(path, h, self.force):
                out[a.name] = read_json(path)
            else:
                det = self.detector(a.name)
                adv = self.adv_set(a.name, "test")
                rep = evaluate_detector(
                    det, clf, te.images, adv, te.labels, chash, self.cfg.evaluation.latency_calls,
                    self.cfg.seed_for("eval"), self.cfg.hash(),
                )
                out[a.name] = {
                    **rep.to_dict(),
                    "stage_hash": h,
                    "upstream": [_up(self.store, self.detector_dir(a.name)), _up(self.store, self.store.adv_cache(a.name, "test"))],
                }
                write_json(path, out[a.name])
            r = out[a.name]
            print(f"evaluate {a.name} auc={r['auc']:.4f} accuracy={r['detection_accuracy']:.4f} "
                  f"success_rate={r['attack_success_rate']:.4f} latency_ms={r['mean_latency_ms']:.4f}")
        return out

    def generalize(self):
        names = [a.name for a in self.detector_attacks()]
        path = self.store.report("generalization.json")
        h = self.h_report("generalize", *[self.h_detector(n) for n in names])
        if self.store.is_current(path, h, self.force):
            res = read_json(path)
        else:
            clf, chash = self.classifier()
            te = self.splits.test
            dets = {n: self.detector(n) for n in names}
            sets = {n: self.adv_set(n, "test") for n in names}
            res = generalization_matrix(dets, sets, clf, te.images, te.labels, chash, self.cfg.seed_for("eval"))
            res["stage_hash"] = h
            res["upstream"] = [_up(self.store, self.detector_dir(n)) for n in names]
            write_json(path, res)
        for a, row in res["matrix"].items():
            cells = " ".join(f"{b}={v:.4f}" for b, v in row.items())
            print(f"generalize {a}: {cells} avg={res['row_average'][a]:.4f}")
        return res

    def _named(self, option, fallback="deepfool"):
        names = [a.name for a in self.detector_attacks()]
        if option:
            if option not in names:
                raise ConfigError(f"attack {option!r} is not among the configured attacks {names}")
            return option
        if not names:
            raise ConfigError("no attacks configured")
        return fallback if fallback in names else names[0]

    def diagnose(self):
        ev = self.cfg.evaluation
        name = self._named(ev.diagnose_attack)
        path = self.store.report(f"separability_{name}.json")
        h = self.h_report("diagnose", self.h_detector(name))
        if self.store.is_current(path, h, self.force):
            res = read_json(path)
        else:
            clf, _ = self.classifier()
            te = self.splits.test
            det = self.detector(name)
            adv = self.adv_set(name, "test")
            images, labels, classes = balanced_test_set(clf, te.images, adv, te.labels, self.cfg.seed_for("diagnose"))
            n = len(labels) // 2
            rep = separability_report(clf, det, images[:n], adv)
            res = {**rep.to_dict(), "stage_hash": h, "upstream": [_up(self.store, self.detector_dir(name))]}
            if ev.export_words:
                m = min(ev.export_limit, n)
                pick = np.r_[np.arange(m), n + np.arange(m)]
                out = export_words(
                    det, clf, images[pick], classes[pick], self.store.export(f"words_{name}"),
                    adversarial=labels[pick], csv=ev.csv,
                )
                res["export"] = str(out.relative_to(self.store.run))
            write_json(path, res)
        for tap, a, b in zip(res["taps"], res["classifier_side"], res["detector_side"]):
            print(f"diagnose {name} {tap}: classifier={a:.4f} detector={b:.4f}")
        return res

    def adaptive_eval(self):
        ev = self.cfg.evaluation
        base_name = self._named(ev.adaptive_base, "pgd")
        path = self.store.report("adaptive.json")
        h = self.h_report("adaptive", self.h_detector(base_name))
        if self.store.is_current(path, h, self.force):
            res = read_json(path)
        else:
            res = self._adaptive(base_name)
            res["stage_hash"] = h
            res["upstream"] = [_up(self.store, self.detector_dir(base_name))]
            write_json(path, res)
        print(f"adaptive-eval before={res['accuracy_before']:.4f} after={res['accuracy_after']:.4f}")
        for row in res["sigma_sweep"]:
            print(f"adaptive-eval sigma={row['sigma']:.2f} classifier_success={row['classifier_success']:.4f} "
                  f"detector_accuracy={row['detector_accuracy']:.4f}")
        return res

    def _adaptive(self, base_name):
        c, ev = self.cfg, self.cfg.evaluation
        clf, chash = self.classifier()
        te = self.splits.test
        base = self.detector(base_name)
        spec_cfg = ev.adaptive_attack
        spec = spec_cfg.spec(c.seed_for("adaptive"))
        k = self.n_craft() if ev.adaptive_train is None else min(ev.adaptive_train, self.n_craft())
        tr = self.splits.train
        bx, by = self.benign_pool()

        test_adv = craft_dataset(clf, spec, te.images, te.labels, detector=base, classifier_hash=chash)
        before = evaluate_detector(base, clf, te.images, test_adv, te.labels, chash, 0, c.seed_for("eval"))
        train_adv = craft_dataset(clf, spec, tr.images[:k], tr.labels[:k], detector=base, classifier_hash=chash)
        tuned = copy.deepcopy(base)
        tuned, history = fine_tune(
            tuned, train_adv, bx, ev.fine_tune_epochs, clf, self._recipe("fine_tune", ev.fine_tune_epochs), by, chash
        )
        after = evaluate_detector(tuned, clf, te.images, test_adv, te.labels, chash, 0, c.seed_for("eval"))
        save_detector(tuned, self.store.checkpoint(f"detector_{base_name}_finetuned"),
                      {"stage_hash": self.h_report("adaptive-detector", self.h_detector(base_name)),
                       "classifier_hash": chash, "upstream": [_up(self.store, self.detector_dir(base_name))]})
        # the white-box attacker re-targets the tuned detector
        rerun = craft_dataset(clf, spec, te.images, te.labels, detector=tuned, classifier_hash=chash)
        rerun_rep = evaluate_detector(tuned, clf, te.images, rerun, te.labels, chash, 0, c.seed_for("eval"))

        sweep = []
        for sigma in ev.sigmas:
            shared = ("eps", "alpha", "iters", "random_start")
            params = {**{key: spec.params[key] for key in shared}, "sigma": sigma}
            s = AttackSpec("adaptive_comb", params, c.seed_for(f"sigma/{sigma}"), f"adaptive_comb_{sigma}")
            adv = craft_dataset(clf, s, te.images, te.labels, detector=base, classifier_hash=chash)
            row = {"sigma": sigma, "classifier_success": adv.success_rate}
            try:
                row["detector_accuracy"] = evaluate_detector(
                    base, clf, te.images, adv, te.labels, chash, 0, c.seed_for("eval")).detection_accuracy
            except FeatsentError:
                row["detector_accuracy"] = float("nan")
            sweep.append(row)
        return {
            "base_detector": base_name,
            "attack": spec.to_dict(),
            "accuracy_before": before.detection_accuracy,
            "auc_before": before.auc,
            "accuracy_after": after.detection_accuracy,
            "auc_after": after.auc,
            "accuracy_after_rerun": rerun_rep.detection_accuracy,
            "classifier_success": test_adv.success_rate,
            "fine_tune_epochs": ev.fine_tune_epochs,
            "fine_tune_history": history,
            "sigma_sweep": sweep,
        }

    # ---- ablations

    def layer_subsets(self):
        """Every contiguous window of Input plus the configured taps, shortest first."""
        ev = self.cfg.evaluation
        if ev.layer_subsets is not None:
            return [list(s) for s in ev.layer_subsets]
        words = ["Input"] + [t for t in self.cfg.taps if t != "Input"]
        return [words[i : i + r] for r in range(1, len(words) + 1) for i in range(len(words) - r + 1)]

    def gram_subsets(self):
        """Every pair of gram sizes, then contiguous runs of three or more, ending with the full set."""
        ev = self.cfg.evaluation
        if ev.gram_subsets is not None:
            return [sorted(s) for s in ev.gram_subsets]
        grams = self.cfg.detector.gram_set
        rows = [list(s) for s in combinations(grams, 2)]
        for r in range(3, len(grams) + 1):
            rows += [grams[i : i + r] for i in range(len(grams) - r + 1)]
        return [list(r) for r in rows] if len(grams) > 1 else [list(grams)]

    def ablate(self, axis):
        if axis not in ("layers", "gram"):
            raise ConfigError("--axis must be 'layers' or 'gram'")
        ev = self.cfg.evaluation
        name = self._named(ev.ablation_attack)
        subsets = self.layer_subsets() if axis == "layers" else self.gram_subsets()
        path = self.store.report(f"ablate_{axis}_{name}.json")
        h = self.h_report(f"ablate-{axis}", self.h_craft(name), self.h_detector(name))
        if self.store.is_current(path, h, self.force):
            res = read_json(path)
        else:
            res = {"axis": axis, "attack": name, "rows": self._ablate(name, axis, subsets), "stage_hash": h,
                   "upstream": [_up(self.store, self.store.adv_cache(name, "train"))]}
            write_json(path, res)
        for row in res["rows"]:
            print(f"ablate {axis} {'+'.join(map(str, row['subset']))}: auc={row['auc']:.4f}")
        return res

    def _ablate(self, name, axis, subsets):
        c = self.cfg
        clf, chash = self.classifier()
        te = self.splits.test
        bx, by = self.benign_pool()
        train_adv = self.adv_set(name, "train")
        test_adv = self.adv_set(name, "test")
        if axis == "layers":
            order = {t: i for i, t in enumerate(clf.tap_names)}
            union = sorted({t for s in subsets for t in s}, key=lambda t: order[t])
        else:
            union = list(c.taps)
        full = plan_taps(clf, union)
        seed = c.seed_for(f"ablate/{axis}")
        ds = assemble(clf, full, bx, train_adv, c.trainer.balance, by, chash, c.trainer.val_fraction, seed, cache=True)
        train_maps = compute_maps(clf, full, ds.images)
        images, labels, _ = balanced_test_set(clf, te.images, test_adv, te.labels, c.seed_for("eval"))
        test_maps = compute_maps(clf, full, images)
        rows = []
        for subset in subsets:
            taps = subset if axis == "layers" else list(c.taps)
            idx = [union.index(t) for t in taps]
            plan = plan_taps(clf, taps)
            grams = clip_grams(c.detector.gram_set if axis == "layers" else subset, plan.L)
            det = build_detector(plan, grams, c.detector.instances_per_gram, c.detector.dropout_rate, seed)
            view = DetectorDataset(ds.images, ds.labels, ds.split, ds.source_index, ds.attack, clf, plan,
                                   ds.class_weights, cache=True, _maps=[train_maps[i] for i in idx])
            det, _ = train(det, view, self._recipe(f"ablate/{axis}", c.evaluation.ablation_epochs))
            maps = [test_maps[i] for i in idx]
            scores = torch.cat([score(det, [m[sl] for m in maps]) for sl in batches(len(labels), 256)]).numpy()
            rep = report_from_scores(scores, labels, test_adv.success_rate)
            rows.append({"subset": list(subset), "taps": taps, "gram_set": grams, "auc": rep.auc,
                         "detection_accuracy": rep.detection_accuracy})
        return rows

    def verify(self):
        problems = self.store.verify()
        for p in problems:
            print(f"verify: {p}")
        if not problems:
            print(f"verify: {len(self.store.manifests())} manifests resolve")
        return problems


def run_command(command, cfg, store, force=False, axis="layers"):
    """Run one pipeline stage under the store lock; returns the stage result."""
    if command not in COMMANDS:
        raise ConfigError(f"unknown command {command!r}; expected one of {COMMANDS}")
    pipe = Pipeline(cfg, store, force)
    with store.lock():
        write_json(store.path("config.json"), cfg.to_dict())
        if command == "train-classifier":
            return pipe.train_classifier()
        if command == "craft":
            return pipe.craft()
        if command == "train-detector":
            return pipe.train_detector()
        if command == "evaluate":
            return pipe.evaluate()
        if command == "generalize":
            return pipe.generalize()
        if command == "diagnose":
            return pipe.diagnose()
        if command == "adaptive-eval":
            return pipe.adaptive_eval()
        if command == "ablate":
            return pipe.ablate(axis)
        problems = pipe.verify()
        if problems:
            raise ProvenanceError(f"{len(problems)} dangling reference(s) in {store.run}")
        return problems


__all__ = ["COMMANDS", "Pipeline", "run_command", "clip_grams", "MissingArtifactError"]
