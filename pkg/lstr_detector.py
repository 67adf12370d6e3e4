#!/usr/bin/env python3
"""
LSTR Action Detector
Command-line front-end: synthetic data generation, training, detection,
evaluation, attention/graph diagnostics and experiments
"""

__version__ = "1.0.0"

import csv
import io
import json
import sys
import time
from collections import OrderedDict
from pathlib import Path

import numpy as np
from PIL import Image

from checkpoint import load_checkpoint, restore, save_checkpoint
from cli_args import parse_arguments
from data_synth import generate, load_split, write_split
from detector import LSTRDetector
from errors import LSTRError
from experiments import ablate, summarize, sweep_edge_terms, sweep_window, write_results_csv
from file_manager import FileManager
from linking_eval import (
    frame_map, parse_iou_thresholds, read_records, tubes_from_records, video_map, write_ap_csv,
    write_records, write_threshold_csv,
)
from logger import RunLogger
from lstr_model import LSTRModel
from run_config import RunConfig, resolve
from trainer import LSTRTrainer
from ui_components import ModernUI
from utils import format_duration, parse_int_list, sanitize_filename, save_json

SPLITS = ("train", "heldout")


class LSTRPipeline:
    """One resolved configuration plus the console it reports to"""

    def __init__(self, cfg: RunConfig, verbose=False, quiet=False, ui=None):
        self.cfg = cfg
        self.ui = ui or ModernUI()
        self.logger = RunLogger(self.ui, verbose=verbose or cfg["ui.verbose"], quiet=quiet or cfg["ui.quiet"])
        self.out_dir = Path(cfg["paths.out"])
        self.data_dir = Path(cfg["paths.data"]) if cfg["paths.data"] else self.out_dir / "data"

    # -- helpers ----------------------------------------------------------

    def checkpoint_path(self, override=None) -> Path:
        if override:
            return Path(override)
        if self.cfg["paths.checkpoint"]:
            return Path(self.cfg["paths.checkpoint"])
        return self.out_dir / "checkpoint.lstrckp"

    def echo_config(self):
        """Show the resolved configuration and write it next to the outputs"""
        FileManager.ensure_directory(self.out_dir)
        path = self.out_dir / "resolved_config.json"
        save_json(self.cfg.to_document(), path)
        if self.logger.verbose:
            self.ui.show_key_values("resolved configuration", self.cfg.rows())
        self.logger.info(f"Resolved configuration written to {path}")

    def load_model(self, checkpoint=None) -> LSTRModel:
        path = FileManager.require_file(self.checkpoint_path(checkpoint), "checkpoint")
        model = LSTRModel(self.cfg)
        restore(model.params, load_checkpoint(path))
        self.logger.debug(f"restored {model.params.num_values()} values from {path}")
        return model

    def load_videos(self, split):
        videos = load_split(self.data_dir, split)
        self.logger.debug(f"{split}: {len(videos)} videos, {sum(len(c) for c in videos.values())} clips")
        return videos

    def load_heldout_truth(self):
        records = read_records(FileManager.require_file(self.data_dir / "ground_truth_heldout.txt",
                                                        "ground truth"))
        return tubes_from_records(records)

    def video_clips(self, split, video_id):
        videos = self.load_videos(split)
        if video_id not in videos:
            raise LSTRError(f"video '{video_id}' not in split '{split}'", "cli")
        return videos[video_id]

    # -- commands ---------------------------------------------------------

    def cmd_gen(self):
        """Write the train and heldout splits"""
        for split in SPLITS:
            synth = self.cfg.synth_config(split)
            videos = generate(synth)
            manifest = write_split(videos, self.data_dir, split, self.cfg.clip_length,
                                   self.cfg["data.clip_stride"], training=(split == "train"))
            self.logger.success(f"{split}: {len(videos)} videos -> {manifest}")
        return self.data_dir

    def cmd_train(self, split="train"):
        videos = self.load_videos(split)
        model = LSTRModel(self.cfg)
        self.logger.info(f"Training {model.params.num_values()} parameters on {len(videos)} videos "
                         f"for {self.cfg['train.epochs']} epochs ({self.cfg['train.schedule']})")
        started = time.time()
        history = LSTRTrainer(model, self.logger).train(videos, self.out_dir / "train_loss.csv", self.out_dir)
        path = save_checkpoint(self.checkpoint_path(), model.params)
        last = history[-1]
        self.logger.success(f"Final loss {last.total_loss:.4f} (tpn {last.tpn_loss:.4f}, relation "
                            f"{last.relation_loss:.4f}) in {format_duration(time.time() - started)}")
        self.logger.success(f"Checkpoint written to {path} ({FileManager.get_file_size(path)})")
        return history

    def cmd_detect(self, split="heldout", checkpoint=None):
        model = self.load_model(checkpoint)
        videos = self.load_videos(split)
        detector = LSTRDetector(model)
        progress = self.ui.create_training_progress() if self.cfg["ui.progress"] and not self.logger.quiet else None
        if progress is not None:
            with progress:
                task = progress.add_task("detecting", total=len(videos), status="")
                results = detector.detect(videos, progress, task)
        else:
            results = detector.detect(videos)
        stride = self.cfg.clip_stride
        frame_records = [r for res in results for r in res.frame_records(stride)]
        track_records = [r for res in results for r in res.track_records()]
        det_path = write_records(self.out_dir / f"detections_{sanitize_filename(split)}.txt", frame_records)
        trk_path = write_records(self.out_dir / f"tracks_{sanitize_filename(split)}.txt", track_records)
        n_tracks = sum(len(res.tracks) for res in results)
        self.logger.success(f"{len(frame_records)} frame records -> {det_path}")
        self.logger.success(f"{n_tracks} tracks -> {trk_path}")
        return results

    def cmd_eval(self, split="heldout", detections=None, tracks=None, gt=None, mode=None, iou=None):
        """
        Frame-mAP and/or video-mAP at one or more IoU thresholds

        Returns {mode: {threshold: MapResult}}. A single threshold writes
        eval_<mode>.csv; several write one eval_<mode>_iou<d>.csv each plus
        eval_<mode>_thresholds.csv.
        """
        if mode == "both":
            modes = ["video", "frame"]
        else:
            modes = [mode] if mode else list(self.cfg["eval.modes"])
        thresholds = parse_iou_thresholds(iou) if iou else [float(self.cfg["eval.iou_threshold"])]
        gt_path = FileManager.require_file(gt or self.data_dir / f"ground_truth_{split}.txt", "ground truth")
        gt_records = read_records(gt_path)
        results = {}
        for m in modes:
            if m == "video":
                path = FileManager.require_file(tracks or self.out_dir / f"tracks_{split}.txt", "track records")
                predicted, truth = tubes_from_records(read_records(path)), tubes_from_records(gt_records)
                score = video_map
            else:
                path = FileManager.require_file(detections or self.out_dir / f"detections_{split}.txt",
                                                "detection records")
                predicted, truth = read_records(path), gt_records
                score = frame_map
            per_threshold = OrderedDict()
            for delta in thresholds:
                cfg = self.cfg.eval_config(m, delta)
                result = score(predicted, truth, cfg)
                name = f"eval_{m}.csv" if len(thresholds) == 1 else f"eval_{m}_iou{delta:.2f}.csv"
                csv_path = write_ap_csv(self.out_dir / name, result)
                self.ui.show_ap_table(f"{m}-mAP@{delta} ({split})", result.per_class, result.mean)
                self.logger.success(f"{m}-mAP@{delta} {result.mean:.4f} -> {csv_path}")
                per_threshold[delta] = result
            if len(thresholds) > 1:
                sweep_path = write_threshold_csv(self.out_dir / f"eval_{m}_thresholds.csv", per_threshold)
                mean = float(np.mean([r.mean for r in per_threshold.values()]))
                self.logger.success(f"{m}-mAP averaged over {len(thresholds)} thresholds {mean:.4f} -> {sweep_path}")
            results[m] = per_threshold
        return results

    def cmd_dump_attention(self, video_id, clip_index, tubelet_index, split="heldout", checkpoint=None):
        """One grayscale PGM per frame plus a CSV of every attention value"""
        model = self.load_model(checkpoint)
        clips = self.video_clips(split, video_id)
        if not 0 <= clip_index < len(clips):
            raise LSTRError(f"video '{video_id}' has {len(clips)} clips, asked for {clip_index}", "cli")
        attn = LSTRDetector(model).attention(clips, clip_index, tubelet_index).values
        out_dir = FileManager.ensure_directory(self.out_dir / "attention")
        stem = f"attn_{sanitize_filename(video_id)}_{clip_index}_{tubelet_index}"
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(["frame", "row", "col", "attention"])
        written = []
        for t, frame in enumerate(attn):
            image = Image.fromarray(np.clip(np.rint(frame * 255.0), 0, 255).astype(np.uint8))
            data = io.BytesIO()
            image.save(data, format="PPM")
            written.append(FileManager.atomic_write_bytes(out_dir / f"{stem}_{t}.pgm", data.getvalue()))
            for (i, j), value in np.ndenumerate(frame):
                writer.writerow([t, i, j, f"{value:.6f}"])
        csv_path = FileManager.atomic_write_text(out_dir / f"{stem}.csv", buffer.getvalue())
        self.logger.success(f"{len(written)} attention frames -> {out_dir} (values in {csv_path.name})")
        return written, csv_path

    def cmd_neighbors(self, video_id, clip_index, tubelet_index, k=None, split="heldout", checkpoint=None):
        model = self.load_model(checkpoint)
        clips = self.video_clips(split, video_id)
        if not 0 <= clip_index < len(clips):
            raise LSTRError(f"video '{video_id}' has {len(clips)} clips, asked for {clip_index}", "cli")
        rows = LSTRDetector(model).neighbors(clips, clip_index, tubelet_index, k)
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(["clip", "tubelet", "weight"])
        for clip, tubelet, weight in rows:
            writer.writerow([clip, tubelet, f"{weight:.8f}"])
        path = FileManager.atomic_write_text(
            self.out_dir / f"neighbors_{sanitize_filename(video_id)}_{clip_index}_{tubelet_index}.csv",
            buffer.getvalue())
        self.logger.success(f"{len(rows)} neighbours -> {path}")
        return rows

    def _experiment_inputs(self):
        return self.load_videos("train"), self.load_videos("heldout"), self.load_heldout_truth()

    def cmd_ablate(self, seeds=None, variants=None):
        train, heldout, truth = self._experiment_inputs()
        results = ablate(self.cfg, train, heldout, truth, seeds, variants, self.logger)
        path = write_results_csv(self.out_dir / "ablation.csv", results)
        self.ui.show_key_values("held-out video-mAP by variant",
                                [(name, f"{value:.4f}") for name, value in summarize(results).items()])
        self.logger.success(f"Ablation results -> {path}")
        return results

    def cmd_sweep_window(self, radii=None):
        train, heldout, truth = self._experiment_inputs()
        results = sweep_window(self.cfg, train, heldout, truth, radii, self.logger)
        path = write_results_csv(self.out_dir / "window_sweep.csv", results)
        self.ui.show_key_values("held-out video-mAP by window radius",
                                [(name, f"{value:.4f}") for name, value in summarize(results).items()])
        self.logger.success(f"Window sweep results -> {path}")
        return results

    def cmd_sweep_edges(self, edge_terms=None):
        train, heldout, truth = self._experiment_inputs()
        results = sweep_edge_terms(self.cfg, train, heldout, truth, edge_terms, self.logger)
        path = write_results_csv(self.out_dir / "edge_terms_sweep.csv", results)
        self.ui.show_key_values("held-out video-mAP by edge score",
                                [(name, f"{value:.4f}") for name, value in summarize(results).items()])
        self.logger.success(f"Edge score results -> {path}")
        return results


def run_command(pipeline: LSTRPipeline, args):
    command = args.command
    if command == 'gen':
        return pipeline.cmd_gen()
    if command == 'train':
        return pipeline.cmd_train(args.split)
    if command == 'detect':
        return pipeline.cmd_detect(args.split, args.checkpoint)
    if command == 'eval':
        return pipeline.cmd_eval(args.split, args.detections, args.tracks, args.gt, args.mode, args.iou)
    if command == 'dump-attn':
        return pipeline.cmd_dump_attention(args.video, args.clip, args.tubelet, args.split, args.checkpoint)
    if command == 'neighbors':
        return pipeline.cmd_neighbors(args.video, args.clip, args.tubelet, args.k, args.split, args.checkpoint)
    if command == 'ablate':
        seeds = parse_int_list(args.seeds) if args.seeds else None
        variants = [v.strip() for v in args.variants.split(',')] if args.variants else None
        return pipeline.cmd_ablate(seeds, variants)
    if command == 'sweep-window':
        return pipeline.cmd_sweep_window(parse_int_list(args.radii) if args.radii else None)
    if command == 'sweep-edges':
        terms = [t.strip() for t in args.terms.split(',')] if args.terms else None
        return pipeline.cmd_sweep_edges(terms)
    raise LSTRError(f"unknown command '{command}'", "cli")


def main(argv=None):
    args = parse_arguments(argv)
    ui = ModernUI()
    try:
        cfg = resolve(args.config, args.assignments, args.seed, args.out)
        if args.print_config:
            print(json.dumps(cfg.to_document(), indent=2))
            return 0
        pipeline = LSTRPipeline(cfg, verbose=args.verbose, quiet=args.quiet, ui=ui)
        if not pipeline.logger.quiet:
            ui.show_banner(args.command, pipeline.out_dir)
        pipeline.echo_config()
        run_command(pipeline, args)
        pipeline.logger.print_summary()
        return 0
    except KeyboardInterrupt:
        ui.error_message("Interrupted")
        return 130
    except (LSTRError, FileNotFoundError, json.JSONDecodeError, IndexError) as e:
        ui.error_message(str(e))
        return 1


if __name__ == "__main__":
    sys.exit(main())
