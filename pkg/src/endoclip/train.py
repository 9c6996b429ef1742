"""Joint training loop, evaluation, embedding export, and gradient checks.

Training optimizes one total objective per batch: pixel-augmented images flow
through the tower to unit joint embeddings, prompts flow through the frozen
text encoder, slerp-synthesized same-class features join both loss terms when
enabled, and AdamW updates only the trainable tensors. Every random draw
derives from (seed, epoch, step/index), so a (seed, config, manifest) triple
fully determines the run, including the checkpoint bytes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .augment import LabeledFeature, augment_image, sample_slerp_batch
from .checkpoint import load_checkpoint, restore_model, save_checkpoint
from .config import TrainConfig
from .data import DatasetManifest, load_all_images
from .encoders import Vocabulary
from .errors import ContractError, EvaluationError, NumericError
from .fusion import FusionConfig, FusionModule, fuse
from .lora import LoraConfig, lora_apply, lora_init
from .model import JointModel
from .objectives import (
    CLASS_NAMES,
    build_prompt,
    classification_loss,
    contrastive_loss,
    total_loss,
)
from .optim import AdamWState, adamw_step
from .retrieval import (
    ClassificationReport,
    EmbeddingIndex,
    class_match_relevance,
    classification_report,
    cosine_sim_matrix,
    mrr,
    rank_queries,
    recall_at_k,
    text_image_scores,
)
from .synthetic import render_image
from .tensor import (
    Tape,
    Tensor,
    backward,
    concat_rows,
    finite_diff_check,
    layer_norm,
    matmul,
    mul,
    row_softmax,
    sum_all,
    zero_grads,
)


@dataclass
class EpochLog:
    epoch: int
    classification_loss: float
    contrastive_loss: float
    total_loss: float
    accuracy: float

    def line(self) -> str:
        return (f"epoch {self.epoch:3d}  cls {self.classification_loss:.4f}  "
                f"con {self.contrastive_loss:.4f}  total {self.total_loss:.4f}  "
                f"acc {self.accuracy:.4f}")


@dataclass
class RetrievalReport:
    task: str
    recall_at_1: float
    mrr: float
    num_queries: int


@dataclass
class TrainResult:
    model: JointModel
    opt_state: AdamWState
    logs: list[EpochLog]


def build_vocabulary(manifest: DatasetManifest) -> Vocabulary:
    """Vocabulary covering every prompt this manifest (and its classes) can emit."""
    texts = [build_prompt(name) for name in CLASS_NAMES]
    texts += [build_prompt(rec.classification, rec.description_en)
              for rec in manifest.records]
    return Vocabulary.from_texts(texts)


def _record_prompts(manifest: DatasetManifest) -> list[str]:
    return [build_prompt(rec.classification, rec.description_en)
            for rec in manifest.records]


def train(config: TrainConfig, manifest: DatasetManifest,
          out_path: Optional[str] = None,
          log_fn: Optional[Callable[[EpochLog], None]] = None,
          max_steps: Optional[int] = None) -> TrainResult:
    """Run the joint loop; write final and best-by-train-loss checkpoints."""
    if len(manifest) == 0:
        raise ContractError("training needs a non-empty manifest")
    vocab = build_vocabulary(manifest)
    model = JointModel(config, vocab)
    images = load_all_images(manifest, config.model.image_size)
    labels = [rec.label for rec in manifest.records]
    prompts = _record_prompts(manifest)
    class_prompts = {i: build_prompt(name) for i, name in enumerate(CLASS_NAMES)}
    trainable = model.trainable_parameters()
    opt_state = AdamWState()
    logs: list[EpochLog] = []
    best_loss = math.inf
    n = len(manifest)
    step = 0
    done = False

    for epoch in range(config.epochs):
        if done:
            break
        order = np.random.default_rng([config.seed, 1, epoch]).permutation(n)
        sums = np.zeros(3)
        correct = 0
        seen = 0
        batches = 0
        for start in range(0, n, config.batch_size):
            if max_steps is not None and step >= max_steps:
                done = True
                break
            batch = order[start:start + config.batch_size]
            step += 1
            drop_rng = np.random.default_rng([config.seed, 2, epoch, step])
            sfa_rng = np.random.default_rng([config.seed, 3, epoch, step])
            with Tape() as tape:
                embeddings = []
                text_rows = []
                batch_labels = []
                for idx in batch:
                    idx = int(idx)
                    aug_rng = np.random.default_rng(
                        [config.augment.rng_seed, epoch, idx])
                    pixels = augment_image(images[idx], manifest.records[idx].classification,
                                           config.augment, aug_rng)
                    embeddings.append(model.embed_image(pixels, training=True, rng=drop_rng))
                    text_rows.append(model.embed_text(prompts[idx]))
                    batch_labels.append(labels[idx])
                real_count = len(batch_labels)
                if config.toggles.sfa and config.sfa_count > 0:
                    feats = [LabeledFeature(e, l) for e, l in zip(embeddings, batch_labels)]
                    for aug in sample_slerp_batch(feats, sfa_rng, config.sfa_count):
                        embeddings.append(aug.embedding)
                        batch_labels.append(aug.class_id)
                        text_rows.append(model.embed_text(class_prompts[aug.class_id]))
                features = concat_rows(embeddings)
                cls_term = classification_loss(features, batch_labels, model.head)
                con_term = contrastive_loss(features, Tensor(np.stack(text_rows)),
                                            config.temperature)
                objective = total_loss(cls_term, con_term, config.loss_weights)
            values = (cls_term.item(), con_term.item(), objective.item())
            if not all(math.isfinite(x) for x in values):
                raise NumericError(
                    f"non-finite loss at epoch {epoch} step {step}: "
                    f"cls={values[0]}, con={values[1]}, total={values[2]}")
            backward(objective, tape)
            adamw_step(trainable, opt_state, config.lr, config.betas, config.weight_decay)
            zero_grads([p for _, p in trainable])
            logits = features.data[:real_count] @ model.head.w.data.T + model.head.b.data
            correct += int(np.sum(np.argmax(logits, axis=1) == np.array(batch_labels[:real_count])))
            sums += values
            seen += real_count
            batches += 1
        if batches == 0:
            break
        log = EpochLog(epoch=epoch, classification_loss=sums[0] / batches,
                       contrastive_loss=sums[1] / batches,
                       total_loss=sums[2] / batches,
                       accuracy=correct / seen)
        logs.append(log)
        if log_fn is not None:
            log_fn(log)
        if out_path is not None and log.total_loss < best_loss:
            best_loss = log.total_loss
            save_checkpoint(f"{out_path}.best", model, config, opt_state, epoch)
    if out_path is not None:
        save_checkpoint(out_path, model, config, opt_state, len(logs))
    return TrainResult(model=model, opt_state=opt_state, logs=logs)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def _index_ids(manifest: DatasetManifest) -> list[str]:
    paths = [rec.path for rec in manifest.records]
    if len(set(paths)) == len(paths):
        return paths
    return [f"{rec.path}#{rec.line}" for rec in manifest.records]


def embed_manifest(model: JointModel, manifest: DatasetManifest,
                   images: Optional[list[np.ndarray]] = None) -> EmbeddingIndex:
    """Evaluation-mode embeddings of every record, as a labeled index."""
    if images is None:
        images = load_all_images(manifest, model.config.model.image_size)
    embeddings = np.stack([model.embed_image(img).data for img in images])
    return EmbeddingIndex(ids=_index_ids(manifest), embeddings=embeddings,
                          labels=np.array([rec.label for rec in manifest.records]))


def evaluate(model: JointModel, manifest: DatasetManifest, task: str):
    """classification -> ClassificationReport; i2i/t2i -> RetrievalReport."""
    if len(manifest) == 0:
        raise EvaluationError("cannot evaluate an empty manifest")
    index = embed_manifest(model, manifest)
    labels = [rec.label for rec in manifest.records]
    if task == "classification":
        logits = index.embeddings @ model.head.w.data.T + model.head.b.data
        return classification_report(np.argmax(logits, axis=1), labels)
    if task == "i2i":
        sims = cosine_sim_matrix(index.embeddings, index.embeddings)
        results = rank_queries(sims, exclude_self=True, query_ids=index.ids,
                               candidate_ids=index.ids)
        relevant = class_match_relevance(labels, index, exclude_self_ids=True,
                                         query_ids=index.ids)
        return RetrievalReport(task="i2i", recall_at_1=recall_at_k(results, relevant, 1),
                               mrr=mrr(results, relevant), num_queries=len(results))
    if task == "t2i":
        queries = np.stack([model.embed_text(p) for p in _record_prompts(manifest)])
        scores = text_image_scores(queries, index.embeddings)
        query_ids = [f"text:{i}" for i in range(len(manifest))]
        results = rank_queries(scores, query_ids=query_ids, candidate_ids=index.ids)
        relevant = class_match_relevance(labels, index, query_ids=query_ids)
        return RetrievalReport(task="t2i", recall_at_1=recall_at_k(results, relevant, 1),
                               mrr=mrr(results, relevant), num_queries=len(results))
    raise EvaluationError(f"unknown task {task!r}; expected classification, i2i, or t2i")


def evaluate_checkpoint(ckpt_path, manifest: DatasetManifest, task: str):
    return evaluate(restore_model(load_checkpoint(ckpt_path)), manifest, task)


# ---------------------------------------------------------------------------
# gradient-check suite
# ---------------------------------------------------------------------------

def total_loss_gradcheck(config: TrainConfig, num_samples: int = 4,
                         step: float = 1e-5) -> float:
    """Finite-difference error of the full objective through every trainable path.

    Deterministic: no pixel augmentation, no dropout, and the slerp pair draws
    reset to a fixed stream on every call.
    """
    rng = np.random.default_rng(config.seed)
    class_ids = [i % 2 for i in range(num_samples)]  # same-class pairs exist
    pixel_batch = [render_image(CLASS_NAMES[c], config.model.image_size, rng)
                   for c in class_ids]
    manifest_free_prompts = [build_prompt(CLASS_NAMES[c]) for c in class_ids]
    vocab = Vocabulary.from_texts(manifest_free_prompts)
    model = JointModel(config, vocab)
    text_rows = [model.embed_text(p) for p in manifest_free_prompts]

    def f() -> Tensor:
        embeddings = [model.embed_image(img) for img in pixel_batch]
        labels = list(class_ids)
        rows = list(text_rows)
        if config.toggles.sfa:
            feats = [LabeledFeature(e, l) for e, l in zip(embeddings, labels)]
            for aug in sample_slerp_batch(feats, np.random.default_rng(12345), count=2):
                embeddings.append(aug.embedding)
                labels.append(aug.class_id)
                rows.append(model.embed_text(build_prompt(CLASS_NAMES[aug.class_id])))
        features = concat_rows(embeddings)
        cls_term = classification_loss(features, labels, model.head)
        con_term = contrastive_loss(features, Tensor(np.stack(rows)), config.temperature)
        return total_loss(cls_term, con_term, config.loss_weights)

    return finite_diff_check(f, [p for _, p in model.trainable_parameters()], step=step)


def gradcheck_suite(config: TrainConfig, step: float = 1e-5) -> dict[str, float]:
    """Named finite-difference checks over the differentiable building blocks."""
    rng = np.random.default_rng(config.seed)
    results: dict[str, float] = {}

    a = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    b = Tensor(rng.standard_normal((4, 3)), requires_grad=True)
    w = Tensor(rng.standard_normal((3, 3)))
    results["matmul_softmax"] = finite_diff_check(
        lambda: sum_all(mul(row_softmax(matmul(a, b)), w)), [a, b], step)

    x = Tensor(rng.standard_normal((4, 6)), requires_grad=True)
    gain = Tensor(rng.standard_normal(6), requires_grad=True)
    bias = Tensor(rng.standard_normal(6), requires_grad=True)
    wn = Tensor(rng.standard_normal((4, 6)))
    results["layer_norm"] = finite_diff_check(
        lambda: sum_all(mul(layer_norm(x, gain, bias), wn)), [x, gain, bias], step)

    adapter = lora_init(8, 8, LoraConfig(rank=2, alpha=4.0, dropout=0.0), seed=config.seed)
    adapter.base = Tensor(rng.standard_normal((8, 8)))
    adapter.b = Tensor(rng.standard_normal((8, 2)), requires_grad=True)
    xin = Tensor(rng.standard_normal((3, 8)))
    wl = Tensor(rng.standard_normal((3, 8)))
    results["lora_apply"] = finite_diff_check(
        lambda: sum_all(mul(lora_apply(adapter, xin), wl)), [adapter.a, adapter.b], step)

    fusion_cfg = FusionConfig(num_selected=2)
    module = FusionModule(8, 4, fusion_cfg, seed=config.seed)
    cls_sources = [Tensor(rng.standard_normal(8), requires_grad=True) for _ in range(3)]
    wf = Tensor(rng.standard_normal(4))
    fusion_params = cls_sources + [p for _, p in module.named_parameters()]
    results["fusion"] = finite_diff_check(
        lambda: sum_all(mul(fuse(cls_sources, module, fusion_cfg), wf)),
        fusion_params, step)

    results["total_loss"] = total_loss_gradcheck(config, step=step)
    return results
