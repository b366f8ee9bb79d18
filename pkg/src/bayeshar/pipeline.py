"""Stage-wise pipeline with on-disk artifacts.

Layout under the output directory::

    dataset/                 manifest.txt + per-split tables
    encoder.ckpt             encoder_trace.csv
    bnn_<mode>.ckpt          bnn_<mode>_trace.csv
    predictions_<mode>.csv   metrics_<mode>.json   evaluation_summary.csv
    explain/                 shap_<mode>.csv, shap_summary_<mode>.json,
                             force_<mode>.csv, beeswarm_<mode>.csv, similarity.csv
    compress/                compression_<mode>.json, bnn_<mode>_compressed.ckpt
    report.json              report.md
    run_manifest.json

Every stage is a pure function of the config (including the root seed).
"""
from __future__ import annotations

import dataclasses
import json
import os
from pathlib import Path

import numpy as np

from . import __version__
from .bnn import (FcBnnModel, bnn_features, embed_windows, build_fcbnn, calibrate_ood_threshold, ood_score,
                  predict, train_fcbnn, weight_variability_summary)
from .config import PipelineConfig
from .data import DatasetSplit, generate_synthetic, load_dataset, save_dataset
from .encoder import EncoderModel, train_encoder, write_trace_csv
from .explain import (CompressionConfig, EmbeddingData, class_means, class_similarity,
                      compress_loop, explain_fcbnn, global_shap_summary, write_explanations_csv)

MODES = ("sota", "tracked")


class MissingArtifactError(FileNotFoundError):
    pass


def _json_default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o))


def write_json(path, obj):
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")
    os.replace(tmp, path)


def auroc(negatives, positives) -> float:
    """Probability that a random positive outscores a random negative (ties count half)."""
    neg = np.asarray(negatives, dtype=np.float64)
    pos = np.asarray(positives, dtype=np.float64)
    if neg.size == 0 or pos.size == 0:
        return float("nan")
    greater = (pos[:, None] > neg[None, :]).sum()
    ties = (pos[:, None] == neg[None, :]).sum()
    return float((greater + 0.5 * ties) / (neg.size * pos.size))


class Pipeline:
    def __init__(self, config: PipelineConfig, out_dir=None):
        self.config = config
        self.out = Path(out_dir or config.out_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self._encoder = None
        self._dataset = None
        self._embeddings = {}

    # -- bookkeeping -------------------------------------------------------
    @property
    def manifest_path(self):
        return self.out / "run_manifest.json"

    def _manifest(self):
        if self.manifest_path.exists():
            m = json.loads(self.manifest_path.read_text())
            if m.get("config_hash") == self.config.hash():
                return m
        return {"config_hash": self.config.hash(), "seed": self.config.seed,
                "tool_version": __version__, "artifacts": {}, "metrics": {}}

    def _record(self, stage, artifacts, metrics=None):
        m = self._manifest()
        m["artifacts"][stage] = sorted(str(Path(a).relative_to(self.out)) for a in artifacts)
        if metrics is not None:
            m["metrics"][stage] = metrics
        write_json(self.manifest_path, m)

    def _require(self, path, stage):
        path = self.out / path
        if not path.exists():
            raise MissingArtifactError(f"missing {path.name}: run the '{stage}' stage first")
        return path

    # -- stages ------------------------------------------------------------
    def generate(self) -> DatasetSplit:
        cfg = self.config.dataset
        if cfg.path:
            ds = load_dataset(cfg.path)
        else:
            spec = dataclasses.replace(cfg.spec, seed=self.config.stage_seed("generate"))
            ds = generate_synthetic(spec)
        d = save_dataset(ds, self.out / "dataset", cfg.format)
        self._dataset = ds
        self._record("generate", [d / "manifest.txt"], ds.manifest())
        return ds

    def dataset(self) -> DatasetSplit:
        if self._dataset is None:
            self._dataset = load_dataset(self._require("dataset/manifest.txt", "generate").parent)
        return self._dataset

    def train_encoder(self):
        ds = self.dataset()
        e = self.config.encoder
        res = train_encoder(ds, self.config.metric, e.epochs, self.config.stage_seed("encoder"),
                            e.latent_dim, tuple(e.hidden), e.lr)
        res.model.save(self.out / "encoder.ckpt")
        write_trace_csv(self.out / "encoder_trace.csv", res.trace)
        self._encoder = res.model
        self._embeddings.clear()
        self._record("train-encoder", [self.out / "encoder.ckpt", self.out / "encoder_trace.csv"],
                     {"initial_total": res.trace[0]["total"], "final_total": res.trace[-1]["total"]})
        return res

    def encoder(self) -> EncoderModel:
        if self._encoder is None:
            self._encoder = EncoderModel.load(self._require("encoder.ckpt", "train-encoder"))
        return self._encoder

    def embed(self, split: str, mode: str):
        """(means, variances) for a split, tracked per recording in tracked mode."""
        key = (split, mode)
        if key not in self._embeddings:
            ws = self.dataset()[split]
            self._embeddings[key] = embed_windows(self.encoder(), ws,
                                                  self.config.tracker if mode == "tracked" else None)
        mu, var = self._embeddings[key]
        return mu.copy(), var.copy()

    def train_bnn(self, mode: str):
        ds = self.dataset()
        b = self.config.bnn
        seed = self.config.stage_seed("bnn") + MODES.index(mode)
        rng = np.random.default_rng(seed)
        tr = bnn_features(*self.embed("train", mode))
        va = bnn_features(*self.embed("validation", mode))
        model = build_fcbnn(self.config.encoder.latent_dim, ds.n_classes, b.hidden, rng,
                            b.prior_sigma, b.rho_init)
        res = train_fcbnn(model, tr, ds.train.y, b.epochs, int(rng.integers(2**31)), va,
                          ds.validation.y, b.batch_size, b.lr)
        path = self.out / f"bnn_{mode}.ckpt"
        model.save(path, {"mode": mode})
        trace_path = self.out / f"bnn_{mode}_trace.csv"
        with open(trace_path, "w") as fh:
            fh.write("epoch,loss,val_accuracy\n")
            for r in res.trace:
                fh.write(f"{r['epoch']},{r['loss']:.10g},{r.get('val_accuracy', float('nan')):.10g}\n")
        self._record(f"train-bnn-{mode}", [path, trace_path],
                     {"param_count": model.n_params(), "final_loss": res.trace[-1]["loss"],
                      "final_val_accuracy": res.trace[-1].get("val_accuracy")})
        return res

    def bnn(self, mode: str) -> FcBnnModel:
        return FcBnnModel.load(self._require(f"bnn_{mode}.ckpt", f"train-bnn --mode {mode}"))

    def evaluate(self, mode: str, with_unknown: bool = True) -> dict:
        ds = self.dataset()
        model = self.bnn(mode)
        T = self.config.bnn.T
        seed = self.config.stage_seed("evaluate")
        val = predict(model, bnn_features(*self.embed("validation", mode)), T, seed)
        threshold = calibrate_ood_threshold(ood_score(val))
        splits = ["test"] + (["unknown"] if with_unknown and len(ds.unknown) else [])
        results = {s: predict(model, bnn_features(*self.embed(s, mode)), T, seed + 1 + i)
                   for i, s in enumerate(splits)}
        K = ds.n_classes
        path = self.out / f"predictions_{mode}.csv"
        with open(path, "w") as fh:
            cols = (["window_id", "true_label", "argmax"] + [f"prob_mean_{k}" for k in range(K)]
                    + [f"prob_std_{k}" for k in range(K)] + ["entropy", "ood_score", "is_ood", "mode"])
            fh.write(",".join(cols) + "\n")
            for s in splits:
                ws, r = ds[s], results[s]
                scores = ood_score(r)
                for i in range(len(ws)):
                    row = [str(ws.ids[i]), str(ws.y[i]), str(r.argmax[i])]
                    row += [f"{v:.10g}" for v in r.prob_mean[i]] + [f"{v:.10g}" for v in r.prob_std[i]]
                    row += [f"{r.entropy[i]:.10g}", f"{scores[i]:.10g}", str(int(scores[i] > threshold)),
                            "SOTA" if mode == "sota" else "tracked"]
                    fh.write(",".join(row) + "\n")
        test = results["test"]
        s_test = ood_score(test)
        metrics = {"mode": mode, "accuracy": float(np.mean(test.argmax == ds.test.y)),
                   "mean_ood_score_known": float(s_test.mean()),
                   "ood_threshold": threshold,
                   "false_rejection_rate": float(np.mean(s_test > threshold)),
                   "per_class_accuracy": [float(np.mean(test.argmax[ds.test.y == k] == k)) for k in range(K)],
                   "sigma_dispersion": [w["sigma_std"] for w in weight_variability_summary(model)]}
        if "unknown" in results:
            s_unk = ood_score(results["unknown"])
            metrics.update({"mean_ood_score_unknown": float(s_unk.mean()),
                            "ood_auroc": auroc(s_test, s_unk),
                            "unknown_rejection_rate": float(np.mean(s_unk > threshold)),
                            "unknown_argmax_histogram": np.bincount(results["unknown"].argmax,
                                                                    minlength=K).tolist()})
        mpath = self.out / f"metrics_{mode}.json"
        write_json(mpath, metrics)
        self._write_summary()
        self._record(f"evaluate-{mode}", [path, mpath, self.out / "evaluation_summary.csv"], metrics)
        return metrics

    def _write_summary(self):
        rows = []
        for mode in MODES:
            p = self.out / f"metrics_{mode}.json"
            if p.exists():
                m = json.loads(p.read_text())
                for key in ("accuracy", "mean_ood_score_known", "mean_ood_score_unknown", "ood_auroc"):
                    if key in m:
                        rows.append(f"{key},{mode},{m[key]:.10g}")
        (self.out / "evaluation_summary.csv").write_text("metric,mode,value\n" + "\n".join(rows) + "\n")

    def explain(self) -> dict:
        ds = self.dataset()
        e = self.config.explain
        d = self.out / "explain"
        d.mkdir(exist_ok=True)
        rng = np.random.default_rng(self.config.stage_seed("explain"))
        out, artifacts, sims = {}, [], []
        pick = np.sort(rng.choice(len(ds.validation), size=min(e.n_explain, len(ds.validation)),
                                  replace=False))
        for mode in MODES:
            model = self.bnn(mode)
            tm, tv = self.embed("train", mode)
            vm, vv = self.embed("validation", mode)
            expl = explain_fcbnn(model, vm[pick], vv[pick], tm, tv, e.T,
                                 int(rng.integers(2**31)), e.n_coalitions)
            summary = global_shap_summary(expl, vm[pick])
            write_explanations_csv(d / f"shap_{mode}.csv", expl, ds.validation.ids[pick], vm[pick])
            with open(d / f"beeswarm_{mode}.csv", "w") as fh:
                fh.write("input,feature,value,phi,class\n")
                for r in summary["beeswarm"]:
                    fh.write(f"{r['input']},{r['feature']},{r['value']:.10g},{r['phi']:.10g},{r['class']}\n")
            with open(d / f"force_{mode}.csv", "w") as fh:
                fh.write("input,class,base_value,output," + ",".join(summary["feature_names"]) + "\n")
                for r in summary["force"]:
                    fh.write(f"{r['input']},{r['class']},{r['base_value']:.10g},{r['output']:.10g},"
                             + ",".join(f"{c:.10g}" for c in r["contributions"]) + "\n")
            js = {"ranking": [summary["feature_names"][i] for i in summary["ranking"]],
                  "mean_abs_phi": summary["mean_abs"],
                  "base_value": expl[0].base_value,
                  "max_efficiency_gap": max(x.efficiency_gap() for x in expl)}
            write_json(d / f"shap_summary_{mode}.json", js)
            artifacts += [d / f"shap_{mode}.csv", d / f"beeswarm_{mode}.csv",
                          d / f"force_{mode}.csv", d / f"shap_summary_{mode}.json"]
            result = {"ranking": js["ranking"], "max_efficiency_gap": js["max_efficiency_gap"]}
            if len(ds.unknown):
                known = class_means(self.embed("test", mode)[0], ds.test.y, ds.n_classes)
                unknown = self.embed("unknown", mode)[0].mean(axis=0)
                sim = class_similarity(known, unknown, mode)
                sims.append(sim)
                result["similarity"] = sim.r.tolist()
                result["similarity_argmax"] = sim.argmax
            out[mode] = result
        if sims:
            with open(d / "similarity.csv", "w") as fh:
                K = len(sims[0].r)
                fh.write("mode," + ",".join(f"class_{k}" for k in range(K)) + ",argmax\n")
                for s in sims:
                    fh.write(s.mode + "," + ",".join(f"{v:.6f}" for v in s.r) + f",{s.argmax}\n")
            artifacts.append(d / "similarity.csv")
        self._record("explain", artifacts, out)
        return out

    def compress(self) -> dict:
        ds = self.dataset()
        d = self.out / "compress"
        d.mkdir(exist_ok=True)
        out, artifacts = {}, []
        for i, mode in enumerate(MODES):
            data = EmbeddingData(*(self.embed(s, mode) + (ds[s].y,)
                                   for s in ("train", "validation", "test")))
            cfg = dataclasses.replace(self.config.compression,
                                      seed=self.config.stage_seed("compress") + i)
            rep = compress_loop(data, self.bnn(mode), cfg)
            write_json(d / f"compression_{mode}.json", rep.to_dict())
            rep.final_model.save(d / f"bnn_{mode}_compressed.ckpt",
                                 {"mode": mode, "kept": rep.final_kept})
            artifacts += [d / f"compression_{mode}.json", d / f"bnn_{mode}_compressed.ckpt"]
            first, last = rep.iterations[0], rep.final
            out[mode] = {"stop_reason": rep.stop_reason, "kept": rep.final_kept,
                         "param_count_full": first.param_count, "param_count_final": last.param_count,
                         "val_accuracy_full": first.val_accuracy, "val_accuracy_final": last.val_accuracy,
                         "test_accuracy_full": first.test_accuracy, "test_accuracy_final": last.test_accuracy}
        self._record("compress", artifacts, out)
        return out

    def report(self) -> dict:
        metrics = {m: json.loads(self._require(f"metrics_{m}.json", f"evaluate --mode {m}").read_text())
                   for m in MODES}
        comp = {m: json.loads(self._require(f"compress/compression_{m}.json", "compress").read_text())
                for m in MODES}
        sim_path = self.out / "explain" / "similarity.csv"
        report = {"modes": {}, "config_hash": self.config.hash()}
        for m in MODES:
            c = comp[m]
            accepted = [it for it in c["iterations"] if it["accepted"]]
            report["modes"][m] = {
                "accuracy": metrics[m]["accuracy"],
                "mean_ood_score_known": metrics[m]["mean_ood_score_known"],
                "mean_ood_score_unknown": metrics[m].get("mean_ood_score_unknown"),
                "ood_auroc": metrics[m].get("ood_auroc"),
                "params_full": c["iterations"][0]["param_count"],
                "params_compressed": accepted[-1]["param_count"],
                "inputs_compressed": len(c["final_kept"]),
                "test_accuracy_full": c["iterations"][0]["test_accuracy"],
                "test_accuracy_compressed": accepted[-1]["test_accuracy"],
            }
        write_json(self.out / "report.json", report)
        lines = ["# Pipeline report", "",
                 "| mode | accuracy | OOD score known | OOD score unknown | OOD AUROC | params full | params compressed | inputs kept | test acc compressed |",
                 "|---|---|---|---|---|---|---|---|---|"]
        for m, r in report["modes"].items():
            lines.append(f"| {m} | {r['accuracy']:.4f} | {r['mean_ood_score_known']:.4f} | "
                         f"{(r['mean_ood_score_unknown'] or float('nan')):.4f} | "
                         f"{(r['ood_auroc'] or float('nan')):.4f} | {r['params_full']} | "
                         f"{r['params_compressed']} | {r['inputs_compressed']} | "
                         f"{r['test_accuracy_compressed']:.4f} |")
        if sim_path.exists():
            lines += ["", "## Unknown-class Pearson similarity", "", "```", sim_path.read_text().strip(), "```"]
        (self.out / "report.md").write_text("\n".join(lines) + "\n")
        self._record("report", [self.out / "report.json", self.out / "report.md"])
        return report

    def run_all(self):
        self.generate()
        self.train_encoder()
        for mode in MODES:
            self.train_bnn(mode)
            self.evaluate(mode)
        self.explain()
        self.compress()
        return self.report()
