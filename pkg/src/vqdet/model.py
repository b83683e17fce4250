"""The toy detector: feature encoder, masked group decoder, heads, and losses.

The encoder is a single pre-norm self-attention layer over the flattened
feature grid with fixed 2D sinusoidal positions. The decoder runs L pre-norm
layers, each applying mask-separated self-attention per query group, then
cross-attention over the encoded grid, then a feed-forward block; shared
prediction heads decode every layer's queries for deep supervision. Learnable
queries carry learned 2D reference points; noisy queries anchor at their
noised box center. Inference drops the noisy blocks and uses only the first
group, so its outputs depend on the weights and the scene alone, never on
training-time configuration.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .attention import (
    AttentionMask,
    AttentionParams,
    GroupQuerySet,
    attention_params,
    build_denoising_mask,
    concat_group_queries,
    masked_multihead_self_attention,
    multihead_cross_attention,
)
from .distill import RefinerParams, forward_looking_distill, iou_weights, refiner_params
from .geometry import NoiseConfig, OrientedBox3D, apply_box_noise, backproject
from .losses import LossWeights, PredictionRows, component_loss
from .matching import Assignment, MatcherWeights, hungarian, matching_cost
from .numerics import ParameterStore, Tensor
from .scenes import Detection, Scene
from .vqd import (
    DenoisingConfig,
    DenoisingLoss,
    LatentDistribution,
    VariationalQueryGenerator,
    denoising_loss,
    sample_reparameterized,
)


@dataclass(frozen=True)
class DetectorConfig:
    groups: int = 2
    queries_per_group: int = 16
    noisy_groups: int = 3
    width: int = 64
    heads: int = 4
    layers: int = 4
    feature_size: int = 16
    num_classes: int = 3
    lambda_det: float = 1.0
    lambda_dn: float = 1.0
    lambda_distill: float = 0.5
    confidence_threshold: float = 0.2
    ffn_multiplier: int = 2
    matcher: MatcherWeights = MatcherWeights()
    loss_weights: LossWeights = LossWeights()

    def __post_init__(self):
        if self.width % self.heads != 0:
            raise ValueError(f"width {self.width} not divisible by heads {self.heads}")
        if self.width % 4 != 0:
            raise ValueError("width must be a multiple of 4 for the 2D position code")
        if min(self.groups, self.queries_per_group, self.heads, self.layers,
               self.feature_size, self.num_classes) < 1 or self.noisy_groups < 0:
            raise ValueError("counts must be positive (noisy_groups may be 0)")
        if min(self.lambda_det, self.lambda_dn, self.lambda_distill) < 0:
            raise ValueError("loss weights must be nonnegative")
        if not 0.0 <= self.confidence_threshold <= 1.0:
            raise ValueError("confidence_threshold must lie in [0, 1]")


def sincos_positions_2d(size: int, width: int) -> np.ndarray:
    """Fixed (size*size, width) positional code; half for x, half for y."""
    quarter = width // 4
    omega = 1.0 / (100.0 ** (np.arange(quarter) / max(quarter, 1)))
    coords = np.arange(size)
    per_axis = np.concatenate([np.sin(np.outer(coords, omega)),
                               np.cos(np.outer(coords, omega))], axis=1)
    rows = np.repeat(per_axis, size, axis=0)       # v varies slowly
    cols = np.tile(per_axis, (size, 1))            # u varies quickly
    return np.concatenate([cols, rows], axis=1)


@dataclass
class LayerTrace:
    queries: list[Tensor]              # per group, (S, D)
    attention: list[np.ndarray]        # per group, head-averaged (S, S)
    predictions: list[PredictionRows]  # per group


@dataclass
class DecoderTrace:
    layers: list[LayerTrace]


@dataclass
class NoisyDraw:
    """The step's frozen randomness: box noise and reparameterization noise."""

    anchors: list[list[list]]          # [group][block][object] AnchorBox6D
    tuples: list[list[list[tuple]]]    # [group][block][object] noisy 3D tuple
    eps: list[list[np.ndarray]]        # [group][block] (K, D) standard normals
    num_objects: int


@dataclass
class DetachedDecisions:
    """Discrete and detached values frozen for replay (probes, determinism)."""

    assignments: list[list[Assignment]]         # [layer][group]
    distill_rows: list[list[int]] | None = None      # [group]
    distill_weights: list[np.ndarray] | None = None  # [group]
    teacher_rows: list[np.ndarray] | None = None     # [group]


@dataclass
class StepLoss:
    total: Tensor
    detection: Tensor
    denoising: DenoisingLoss
    distillation: Tensor
    decisions: DetachedDecisions
    attention_maps: list[np.ndarray]   # last layer, per group


def overall_loss(l_det: Tensor, l_dn: Tensor, l_distill: Tensor,
                 lambdas: tuple[float, float, float]) -> Tensor:
    """Weighted sum of the three training terms."""
    return l_det * lambdas[0] + l_dn * lambdas[1] + l_distill * lambdas[2]


class Detector:
    """Parameters plus the forward passes; all state lives in the store.

    Parameter creation order is fixed and independent of the training mode,
    so equal seeds give equal weights across mode configurations and any
    checkpoint loads into any mode.
    """

    def __init__(self, cfg: DetectorConfig, seed: int):
        self.cfg = cfg
        self.input_channels = cfg.num_classes + 3
        self.store = ParameterStore(rng_seed=seed)
        self.pos_enc = sincos_positions_2d(cfg.feature_size, cfg.width)
        self._build()

    # parameter construction -------------------------------------------------

    def _ln(self, name: str) -> tuple[Tensor, Tensor]:
        d = self.cfg.width
        return (self.store.param(f"{name}.g", (d,), init=np.ones(d)),
                self.store.param(f"{name}.b", (d,), scale=0.0))

    def _linear(self, name: str, din: int, dout: int, scale: float = 0.1,
                bias_init: float = 0.0) -> tuple[Tensor, Tensor]:
        return (self.store.param(f"{name}.w", (din, dout), scale=scale),
                self.store.param(f"{name}.b", (dout,),
                                 init=np.full(dout, bias_init)))

    def _build(self) -> None:
        cfg = self.cfg
        d = cfg.width
        hidden = cfg.ffn_multiplier * d
        self.enc_proj = self._linear("enc.proj", self.input_channels, d)
        self.enc_attn = attention_params(self.store, "enc.attn", d)
        self.enc_ln1 = self._ln("enc.ln1")
        self.enc_ln2 = self._ln("enc.ln2")
        self.enc_ffn1 = self._linear("enc.ffn.1", d, hidden)
        self.enc_ffn2 = self._linear("enc.ffn.2", hidden, d)

        self.dec_self: list[AttentionParams] = []
        self.dec_cross: list[AttentionParams] = []
        self.dec_lns = []
        self.dec_ffn = []
        for i in range(cfg.layers):
            self.dec_self.append(attention_params(self.store, f"dec{i}.self", d))
            self.dec_cross.append(attention_params(self.store, f"dec{i}.cross", d))
            self.dec_lns.append((self._ln(f"dec{i}.ln1"), self._ln(f"dec{i}.ln2"),
                                 self._ln(f"dec{i}.ln3")))
            self.dec_ffn.append((self._linear(f"dec{i}.ffn.1", d, hidden),
                                 self._linear(f"dec{i}.ffn.2", hidden, d)))

        self.out_ln = self._ln("out_ln")
        self.head_cls = self._linear("head.cls", d, cfg.num_classes, bias_init=-2.5)
        self.head_center = self._linear("head.center", d, 2)
        self.head_lrtb = self._linear("head.lrtb", d, 4, bias_init=-1.8)
        self.head_size = self._linear("head.size", d, 3, bias_init=1.5)
        self.head_angle = self._linear("head.angle", d, 2)
        self.head_depth = self._linear("head.depth", d, 1, bias_init=20.0)

        gn = cfg.groups * cfg.queries_per_group
        self.query_content = self.store.param("queries.content", (gn, d), scale=0.02)
        self.query_ref = self.store.param("queries.ref", (gn, 2), scale=1.0)
        self.lref = self._linear("lref", 2, d)
        self.aref = self._linear("aref", 6, d)
        self.vqg = VariationalQueryGenerator(self.store, cfg.num_classes, d)
        self.refiner: RefinerParams = refiner_params(self.store, d)

    # forward passes ---------------------------------------------------------

    def encode_features(self, grid: np.ndarray) -> Tensor:
        """One pre-norm self-attention layer over grid tokens plus positions."""
        f = self.cfg.feature_size
        if grid.shape != (f, f, self.input_channels):
            raise ValueError(f"grid shape {grid.shape}, expected "
                             f"({f}, {f}, {self.input_channels})")
        tokens = nm.Tensor(grid.reshape(f * f, self.input_channels))
        x = nm.linear(tokens, *self.enc_proj) + nm.Tensor(self.pos_enc)
        normed = nm.layer_norm(x, *self.enc_ln1)
        x = x + multihead_cross_attention(normed, normed, self.enc_attn, self.cfg.heads)
        hidden = nm.relu(nm.linear(nm.layer_norm(x, *self.enc_ln2), *self.enc_ffn1))
        return x + nm.linear(hidden, *self.enc_ffn2)

    def draw_noisy_queries(self, scene: Scene, noise_cfg: NoiseConfig,
                           rng: np.random.Generator) -> NoisyDraw:
        """Draw every random input of the step's noisy blocks up front."""
        cfg = self.cfg
        k = len(scene.objects)
        anchors, tuples, eps = [], [], []
        for _ in range(cfg.groups):
            ga, gt_, ge = [], [], []
            for _ in range(cfg.noisy_groups):
                pairs = [apply_box_noise(obj, noise_cfg, rng, cfg.num_classes)
                         for obj in scene.objects]
                ga.append([p[0] for p in pairs])
                gt_.append([p[1] for p in pairs])
                ge.append(rng.standard_normal((k, cfg.width)))
            anchors.append(ga)
            tuples.append(gt_)
            eps.append(ge)
        return NoisyDraw(anchors=anchors, tuples=tuples, eps=eps, num_objects=k)

    def build_group_inputs(self, noisy: NoisyDraw | None, mode: str
                           ) -> tuple[GroupQuerySet, list[Tensor], AttentionMask,
                                      LatentDistribution | None]:
        """Assemble per-group query blocks, references, mask, and latents."""
        cfg = self.cfg
        n = cfg.queries_per_group
        use_noisy = noisy is not None and cfg.noisy_groups > 0 and noisy.num_objects > 0
        k = noisy.num_objects if use_noisy else 0
        c = cfg.noisy_groups if use_noisy else 0

        groups, refs, mus, log_vars = [], [], [], []
        for g in range(cfg.groups):
            content = nm.narrow_rows(self.query_content, g * n, n)
            lr = nm.sigmoid(nm.narrow_rows(self.query_ref, g * n, n))
            q_learn = content + nm.linear(lr, *self.lref)
            blocks = []
            anchor_centers = np.zeros((k * c, 2))
            for j in range(c):
                anchors = noisy.anchors[g][j]
                dist = self.vqg.encode(anchors, noisy.tuples[g][j])
                mus.append(dist.mu)
                log_vars.append(dist.log_var)
                z = sample_reparameterized(dist, None, mode, eps=noisy.eps[g][j])
                anchor_mat = np.array([[a.x_c, a.y_c, a.l, a.r, a.t, a.b]
                                       for a in anchors]).reshape(k, 6)
                blocks.append(z + nm.linear(nm.Tensor(anchor_mat), *self.aref))
                anchor_centers[j * k:(j + 1) * k] = anchor_mat[:, :2]
            q = concat_group_queries(q_learn, blocks)
            ref = nm.concat_rows([lr, nm.Tensor(anchor_centers)]) if k * c else lr
            groups.append(q)
            refs.append(ref)

        queries = GroupQuerySet(groups=groups, n=n, k=k, c=c)
        mask = build_denoising_mask(n, k, c)
        dist_all = None
        if mus:
            dist_all = LatentDistribution(mu=nm.concat_rows(mus),
                                          log_var=nm.concat_rows(log_vars))
        return queries, refs, mask, dist_all

    def _apply_heads(self, q: Tensor, ref: Tensor) -> PredictionRows:
        h = nm.layer_norm(q, *self.out_ln)
        return PredictionRows(
            class_logits=nm.linear(h, *self.head_cls),
            centers=ref + nm.linear(h, *self.head_center),
            lrtb=nm.softplus(nm.linear(h, *self.head_lrtb)),
            size3d=nm.softplus(nm.linear(h, *self.head_size)),
            angle=nm.linear(h, *self.head_angle),
            depth=nm.softplus(nm.linear(h, *self.head_depth)),
        )

    def decoder_forward(self, memory: Tensor, queries: GroupQuerySet,
                        refs: list[Tensor], mask: AttentionMask) -> DecoderTrace:
        cfg = self.cfg
        layers = []
        current = list(queries.groups)
        for i in range(cfg.layers):
            (ln1, ln2, ln3) = self.dec_lns[i]
            ffn1, ffn2 = self.dec_ffn[i]
            out_queries, out_attn, out_preds = [], [], []
            for g, q in enumerate(current):
                sa, attn = masked_multihead_self_attention(
                    nm.layer_norm(q, *ln1), mask, self.dec_self[i], cfg.heads)
                q = q + sa
                q = q + multihead_cross_attention(
                    nm.layer_norm(q, *ln2), memory, self.dec_cross[i], cfg.heads)
                hidden = nm.relu(nm.linear(nm.layer_norm(q, *ln3), *ffn1))
                q = q + nm.linear(hidden, *ffn2)
                out_queries.append(q)
                out_attn.append(attn)
                out_preds.append(self._apply_heads(q, refs[g]))
            current = out_queries
            layers.append(LayerTrace(queries=out_queries, attention=out_attn,
                                     predictions=out_preds))
        return DecoderTrace(layers=layers)


def slice_prediction_rows(pred: PredictionRows, start: int, count: int) -> PredictionRows:
    return PredictionRows(
        class_logits=nm.narrow_rows(pred.class_logits, start, count),
        centers=nm.narrow_rows(pred.centers, start, count),
        lrtb=nm.narrow_rows(pred.lrtb, start, count),
        size3d=nm.narrow_rows(pred.size3d, start, count),
        angle=nm.narrow_rows(pred.angle, start, count),
        depth=nm.narrow_rows(pred.depth, start, count),
    )


def decode_box_rows(pred: PredictionRows, rows: list[int],
                    intrinsics) -> list[OrientedBox3D]:
    """Detached 3D boxes for the given query rows (for IoU weights / eval)."""
    centers = pred.centers.data
    sizes = pred.size3d.data
    angles = pred.angle.data
    depths = pred.depth.data
    out = []
    for r in rows:
        d = float(depths[r, 0])
        x, y, z = backproject(centers[r, 0], centers[r, 1], d, intrinsics)
        yaw = math.atan2(angles[r, 0], angles[r, 1])
        out.append(OrientedBox3D(float(x), float(y), float(z),
                                 float(sizes[r, 0]), float(sizes[r, 1]),
                                 float(sizes[r, 2]), yaw))
    return out


def training_loss(det: Detector, scene: Scene, noisy: NoisyDraw | None,
                  dn_cfg: DenoisingConfig, beta_scale: float = 1.0,
                  replay: DetachedDecisions | None = None) -> StepLoss:
    """Full per-scene loss with deep supervision on every decoder layer.

    ``replay`` pins the discrete/detached inner decisions (assignments,
    distillation rows, weights, and teacher values) from an earlier call so
    the loss becomes a pure differentiable function of the parameters.
    """
    cfg = det.cfg
    n = cfg.queries_per_group
    memory = det.encode_features(scene.grid)
    queries, refs, mask, dist = det.build_group_inputs(noisy, dn_cfg.mode)
    trace = det.decoder_forward(memory, queries, refs, mask)
    k, c = queries.k, queries.c
    weights = cfg.loss_weights
    gts = scene.objects

    detection = nm.Tensor(0.0)
    assignments: list[list[Assignment]] = []
    for li, layer in enumerate(trace.layers):
        layer_assign = []
        for g, pred in enumerate(layer.predictions):
            learn = slice_prediction_rows(pred, 0, n)
            if replay is not None:
                assign = replay.assignments[li][g]
            else:
                cost = matching_cost(learn.class_probs(), learn.centers.data,
                                     learn.corner_boxes_array(), gts, cfg.matcher)
                assign = hungarian(cost)
            layer_assign.append(assign)
            matched_gts = [gts[j] for j in assign.gt_indices()]
            detection = detection + component_loss(
                learn, assign.query_indices(), matched_gts, weights)
        assignments.append(layer_assign)

    if k > 0 and c > 0:
        per_layer_blocks = []
        for layer in trace.layers:
            blocks = []
            for pred in layer.predictions:
                for j in range(c):
                    blocks.append((slice_prediction_rows(pred, n + j * k, k), gts))
            per_layer_blocks.append(blocks)
        dn = denoising_loss(per_layer_blocks, dist, dn_cfg, weights, beta_scale)
    else:
        zero = nm.Tensor(0.0)
        dn = DenoisingLoss(total=zero, reconstruction=zero, kl=zero)

    decisions = DetachedDecisions(assignments=assignments)
    if cfg.lambda_distill > 0 and cfg.layers > 1:
        if replay is not None and replay.distill_rows is not None:
            rows = replay.distill_rows
            row_weights = replay.distill_weights
            teacher = replay.teacher_rows
        else:
            gt_boxes = [b for _, b in scene.gt_boxes3d()]
            rows, row_weights = [], []
            final_layer = trace.layers[-1]
            for g, assign in enumerate(assignments[-1]):
                pred = final_layer.predictions[g]
                all_boxes = decode_box_rows(pred, list(range(pred.rows)),
                                            scene.intrinsics)
                lw = iou_weights(all_boxes, assign, gt_boxes)
                # noisy row n + j*k + i reconstructs ground truth i
                noisy_rows = list(range(n, n + k * c))
                nw = np.array([iou3d_pair(all_boxes[r], gt_boxes[(r - n) % k])
                               for r in noisy_rows])
                rows.append(assign.query_indices() + noisy_rows)
                row_weights.append(np.concatenate([lw, nw]))
            teacher = [final_layer.queries[g].data[rows[g]]
                       for g in range(cfg.groups)]
        decisions.distill_rows = rows
        decisions.distill_weights = row_weights
        decisions.teacher_rows = teacher
        distillation = forward_looking_distill(
            [layer.queries for layer in trace.layers], rows, row_weights,
            det.refiner, teacher_rows=teacher)
    else:
        distillation = nm.Tensor(0.0)

    total = overall_loss(detection, dn.total, distillation,
                         (cfg.lambda_det, cfg.lambda_dn, cfg.lambda_distill))
    return StepLoss(total=total, detection=detection, denoising=dn,
                    distillation=distillation, decisions=decisions,
                    attention_maps=trace.layers[-1].attention)


def iou3d_pair(a: OrientedBox3D, b: OrientedBox3D) -> float:
    from .geometry import iou3d
    return iou3d(a, b)


def inference(det: Detector, scene: Scene) -> list[Detection]:
    """Detections from the first group's learnable queries, no noisy blocks.

    Queries with maximum class confidence below the configured threshold are
    discarded; there is no non-maximum suppression.
    """
    cfg = det.cfg
    n = cfg.queries_per_group
    memory = det.encode_features(scene.grid)
    content = nm.narrow_rows(det.query_content, 0, n)
    lr = nm.sigmoid(nm.narrow_rows(det.query_ref, 0, n))
    q = content + nm.linear(lr, *det.lref)
    queries = GroupQuerySet(groups=[q], n=n, k=0, c=0)
    trace = det.decoder_forward(memory, queries, [lr], build_denoising_mask(n, 0, 0))
    pred = trace.layers[-1].predictions[0]
    probs = pred.class_probs()
    detections = []
    boxes = decode_box_rows(pred, list(range(n)), scene.intrinsics)
    corners = pred.corner_boxes_array()
    for r in range(n):
        score = float(probs[r].max())
        if score < cfg.confidence_threshold:
            continue
        detections.append(Detection(
            scene_id=scene.scene_id, category=int(probs[r].argmax()),
            score=score, box3d=boxes[r], corners2d=tuple(corners[r])))
    return detections
