"""Seeded dual-edit tasks and the four-setting loss ablation."""
from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Iterable, Optional, Sequence

import numpy as np

from .backend_toy.backend import ToyBackend
from .backend_toy.scenes import COLORS, KINDS, SyntheticScene, random_scene
from .core import EditSpec, GuidanceConfig
from .inversion import InversionTrajectory
from .metrics import EvalReport, RegionTarget, evaluate
from .metrics.classifier import ToyClassifier
from .pipeline import edit, invert_image

log = logging.getLogger(__name__)

# (uses OAL, uses CCL)
SETTINGS = {1: (False, False), 2: (True, False), 3: (False, True), 4: (True, True)}


@dataclass
class EditTask:
    """One shape swap on object ``swap_index`` and one recolor on the other object."""

    scene: SyntheticScene
    swap_index: int
    new_kind: str
    new_color: str
    task_id: str = ""

    @property
    def recolor_index(self) -> int:
        return 1 - self.swap_index

    @property
    def target_scene(self) -> SyntheticScene:
        return self.scene.with_shape(self.swap_index, kind=self.new_kind).with_shape(
            self.recolor_index, color=self.new_color
        )

    @property
    def source_prompt(self) -> str:
        return self.scene.caption

    @property
    def target_prompt(self) -> str:
        return self.target_scene.caption

    def image(self) -> np.ndarray:
        return self.scene.render()

    def edit_specs(self, backend: ToyBackend) -> list[EditSpec]:
        tgt = backend.ids(self.target_prompt)
        masks = self.scene.masks
        # caption words per object: "a <color> <kind>", objects left to right, BOS first
        kind_pos = 3 + 4 * self.swap_index
        color_pos = 2 + 4 * self.recolor_index
        assert backend.vocabulary.word(tgt[kind_pos]) == self.new_kind
        assert backend.vocabulary.word(tgt[color_pos]) == self.new_color
        return [
            EditSpec(masks[self.swap_index], (kind_pos,), f"{self.scene.shapes[self.swap_index].kind}->{self.new_kind}"),
            EditSpec(masks[self.recolor_index], (color_pos,), f"{self.scene.shapes[self.recolor_index].color}->{self.new_color}"),
        ]

    def region_targets(self) -> list[RegionTarget]:
        masks = self.scene.masks
        a, b = self.scene.shapes[self.swap_index], self.scene.shapes[self.recolor_index]
        return [
            RegionTarget(masks[self.swap_index], self.new_kind, a.color),
            RegionTarget(masks[self.recolor_index], b.kind, self.new_color),
        ]


def task_from_scene(scene: SyntheticScene, rng: np.random.Generator, task_id: str = "") -> EditTask:
    swap = int(rng.integers(0, 2))
    kinds = [k for k in KINDS if k != scene.shapes[swap].kind]
    colors = [c for c in COLORS if c != scene.shapes[1 - swap].color]
    return EditTask(scene, swap, str(rng.choice(kinds)), str(rng.choice(colors)), task_id)


def standard_task(seed: int) -> EditTask:
    rng = np.random.default_rng(10_000 + seed)
    return task_from_scene(random_scene(rng, 2, overlap=False), rng, f"seed{seed}")


def task_suite(n: int, seed: int = 0, scenes: Optional[Sequence[SyntheticScene]] = None) -> list[EditTask]:
    """``n`` tasks, from the given two-object non-overlapping scenes or freshly generated ones."""
    if scenes is None:
        return [standard_task(seed + i) for i in range(n)]
    rng = np.random.default_rng(seed)
    usable = [s for s in scenes if len(s.shapes) == 2 and not s.overlap_flag]
    return [task_from_scene(s, rng, f"scene{i}") for i, s in enumerate(usable[:n])]


def setting_config(setting: int, base: GuidanceConfig = GuidanceConfig()) -> GuidanceConfig:
    use_oal, use_ccl = SETTINGS[setting]
    return replace(
        base,
        lambda1=base.lambda1 if use_oal else 0.0,
        lambda2=base.lambda2 if use_ccl else 0.0,
    )


@dataclass
class TaskOutcome:
    task_id: str
    setting: int
    report: EvalReport
    image: np.ndarray


def run_task(
    backend: ToyBackend,
    classifier: ToyClassifier,
    task: EditTask,
    settings: Iterable[int],
    base: GuidanceConfig = GuidanceConfig(),
    trajectory: Optional[InversionTrajectory] = None,
) -> list[TaskOutcome]:
    image = task.image()
    if trajectory is None:
        trajectory = invert_image(backend, image, task.source_prompt, base.total_steps, base.guidance_scale)
    specs = task.edit_specs(backend)
    out = []
    for setting in settings:
        cfg = setting_config(setting, base)
        res = edit(backend, image, task.source_prompt, task.target_prompt, specs, cfg, trajectory=trajectory)
        report = evaluate(
            image,
            res.image,
            res.union_mask,
            task.region_targets(),
            classifier,
            {"task": task.task_id, "setting": setting, "target_prompt": task.target_prompt},
        )
        out.append(TaskOutcome(task.task_id, setting, report, res.image))
    return out


@dataclass
class AblationSummary:
    rows: dict[int, dict[str, float]]

    def ordering_failures(self) -> list[str]:
        """Setting 4 best on all three scores, setting 1 worst on alignment (ties allowed)."""
        fails = []
        rows = self.rows
        if 4 in rows:
            for s, r in rows.items():
                if s == 4:
                    continue
                if r["alignment"] > rows[4]["alignment"]:
                    fails.append(f"setting {s} alignment {r['alignment']:.3f} > setting 4 {rows[4]['alignment']:.3f}")
                if r["bg_ssim"] > rows[4]["bg_ssim"]:
                    fails.append(f"setting {s} bg_ssim {r['bg_ssim']:.4f} > setting 4 {rows[4]['bg_ssim']:.4f}")
                if r["bg_perceptual"] < rows[4]["bg_perceptual"]:
                    fails.append(
                        f"setting {s} bg_perceptual {r['bg_perceptual']:.5f} < setting 4 {rows[4]['bg_perceptual']:.5f}"
                    )
        if 1 in rows:
            for s, r in rows.items():
                if s != 1 and r["alignment"] < rows[1]["alignment"]:
                    fails.append(f"setting {s} alignment {r['alignment']:.3f} < setting 1 {rows[1]['alignment']:.3f}")
        return fails

    def table(self) -> str:
        lines = [f"{'setting':>8} {'OAL':>4} {'CCL':>4} {'alignment':>10} {'bg_ssim':>8} {'bg_perc':>9}"]
        for s in sorted(self.rows):
            r = self.rows[s]
            o, c = SETTINGS[s]
            lines.append(
                f"{s:>8} {'x' if o else '-':>4} {'x' if c else '-':>4} "
                f"{r['alignment']:>10.3f} {r['bg_ssim']:>8.4f} {r['bg_perceptual']:>9.5f}"
            )
        return "\n".join(lines)


def summarize(outcomes: Sequence[TaskOutcome]) -> AblationSummary:
    by: dict[int, list[EvalReport]] = {}
    for o in outcomes:
        by.setdefault(o.setting, []).append(o.report)
    rows = {}
    for s, reps in by.items():
        succ = [h for r in reps for h in r.per_edit_success]
        rows[s] = {
            "alignment": float(np.mean(succ)) if succ else float("nan"),
            "bg_ssim": float(np.mean([r.bg_ssim for r in reps])),
            "bg_perceptual": float(np.mean([r.bg_perceptual for r in reps])),
            "n": len(reps),
        }
    return AblationSummary(rows)
