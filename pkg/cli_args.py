"""
Command-line argument parser for the LSTR detector
This module contains all argument parsing
"""

import argparse
from ui_components import Icons

__version__ = "1.0.0"


def _add_common(parser):
    """Options every sub-command accepts"""
    parser.add_argument('--config', help='JSON configuration file (a resolved_config.json echo also works)')
    parser.add_argument('--set', dest='assignments', action='append', default=[], metavar='KEY=VALUE',
                        help='Override one dotted key, e.g. --set tpn.nms_threshold=0.6 (repeatable)')
    parser.add_argument('--seed', type=int, help='Global seed (overrides the config file)')
    parser.add_argument('--out', help='Output directory (overrides paths.out)')
    parser.add_argument('--print-config', action='store_true',
                        help='Print the resolved configuration and exit')
    parser.add_argument('--verbose', action='store_true', help='Show debug output')
    parser.add_argument('--quiet', action='store_true', help='Only show warnings and errors')


def create_argument_parser():
    """Create and configure the argument parser for the application"""
    parser = argparse.ArgumentParser(
        prog='lstr',
        description=f"{Icons.get('detect')} LSTR spatio-temporal action detector\n\n"
                    "Tubelet proposals, short-term human-context relation, long-term "
                    "cross-clip relation graph, track linking and mAP evaluation.",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog=f"""
{'═'*79}
{Icons.get('tip')} TYPICAL RUN
{'═'*79}

  lstr gen   --out runs/demo
  lstr train --out runs/demo
  lstr detect --out runs/demo --split heldout
  lstr eval  --out runs/demo --split heldout

  Diagnostics:
  lstr dump-attn  --out runs/demo --video heldout_0000 --clip 0 --tubelet 0
  lstr neighbors  --out runs/demo --video heldout_0000 --clip 1 --tubelet 0 --k 10

  Experiments:
  lstr ablate       --out runs/demo --seeds 0,1,2,3,4
  lstr sweep-window --out runs/demo --radii 3,4,5,6
  lstr sweep-edges  --out runs/demo --terms similarity,overlap,both
  lstr eval         --out runs/demo --mode video --iou 0.5:0.95
{'═'*79}
        """
    )
    parser.add_argument('-v', '--version', action='version', version=f'lstr v{__version__}',
                        help='Show program version and exit')
    sub = parser.add_subparsers(dest='command', metavar='command')
    sub.required = True

    p = sub.add_parser('gen', help='Generate the synthetic train and heldout splits')
    _add_common(p)

    p = sub.add_parser('train', help='Train the full pipeline and write a checkpoint')
    _add_common(p)
    p.add_argument('--split', default='train', help='Split to train on (default: train)')

    p = sub.add_parser('detect', help='Run detection and linking on a split')
    _add_common(p)
    p.add_argument('--split', default='heldout', help='Split to detect on (default: heldout)')
    p.add_argument('--checkpoint', help='Checkpoint file (default: <out>/checkpoint.lstrckp)')

    p = sub.add_parser('eval', help='Score detections with frame-mAP and/or video-mAP')
    _add_common(p)
    p.add_argument('--split', default='heldout', help='Split to evaluate (default: heldout)')
    p.add_argument('--detections', help='Per-frame detection records (default: <out>/detections_<split>.txt)')
    p.add_argument('--tracks', help='Linked track records (default: <out>/tracks_<split>.txt)')
    p.add_argument('--gt', help='Ground-truth records (default: <data>/ground_truth_<split>.txt)')
    p.add_argument('--mode', choices=['frame', 'video', 'both'], help='Evaluation mode (default: eval.modes)')
    p.add_argument('--iou', help='IoU threshold(s): 0.5, a list 0.2,0.5,0.75 or a range 0.5:0.95 '
                                  '(default: eval.iou_threshold)')

    for name, text in (('dump-attn', 'Write attention maps of one proposal as PGM images and CSV'),
                       ('neighbors', 'Write the top-k relation-graph neighbours of one proposal')):
        p = sub.add_parser(name, help=text)
        _add_common(p)
        p.add_argument('--split', default='heldout', help='Split holding the video (default: heldout)')
        p.add_argument('--checkpoint', help='Checkpoint file (default: <out>/checkpoint.lstrckp)')
        p.add_argument('--video', required=True, help='Video id')
        p.add_argument('--clip', type=int, default=0, help='Clip index (default: 0)')
        p.add_argument('--tubelet', type=int, default=0, help='Proposal index within the clip (default: 0)')
        if name == 'neighbors':
            p.add_argument('--k', type=int, help='Number of neighbours (default: long_term.neighbors_k)')

    p = sub.add_parser('ablate', help='Train/evaluate the relation variants over seeds')
    _add_common(p)
    p.add_argument('--seeds', help='Comma-separated seeds (default: experiments.seeds)')
    p.add_argument('--variants', help='Comma-separated variants (default: experiments.variants)')

    p = sub.add_parser('sweep-window', help='Train/evaluate one model per temporal window radius')
    _add_common(p)
    p.add_argument('--radii', help='Comma-separated radii (default: experiments.radii)')

    p = sub.add_parser('sweep-edges', help='Train/evaluate one model per relation edge score')
    _add_common(p)
    p.add_argument('--terms', help='Comma-separated edge scores from similarity, overlap, both '
                                   '(default: experiments.edge_terms)')

    return parser


def parse_arguments(argv=None):
    """Parse and return command-line arguments"""
    parser = create_argument_parser()
    return parser.parse_args(argv)
