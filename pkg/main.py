import argparse
import json
import os
import sys

from _errors import DivergenceError, RegistrationError
from _globals import EXIT_INPUT, EXIT_NUMERICAL, EXIT_OK
from _logging import setup_logging
from config import load_config
from deformable import warp_into_frame
from evaluation import AblationPair, classify_success, compute_tre, format_ablation_table, run_ablation, \
    transform_landmarks, write_ablation_csv
from features import make_matcher
from fileio import load_affine, load_displacement_field, load_image, load_landmarks, load_pairs_manifest, \
    save_affine, save_displacement_field, save_image, save_landmarks
from pipeline import register_pair
from synthetic import make_synthetic_pair


def cmd_register(args, logger):
    config = load_config(args.config)
    out_dir = args.out or config.output_dir or 'registration_output'
    source = load_image(args.source)
    target = load_image(args.target)
    report = register_pair(source, target, config, out_dir, initial_only=args.initial_only,
                           seed=args.seed, logger=logger, progress=args.progress)
    if report['no_accepted_candidate']:
        logger.warning("No candidate passed the scale filter; the identity transform was written")
    return EXIT_OK


def cmd_evaluate(args, logger):
    landmarks_target = load_landmarks(args.landmarks_a)
    landmarks_source = load_landmarks(args.landmarks_b)
    before = compute_tre(landmarks_target, landmarks_source)
    if args.field:
        moved = transform_landmarks(landmarks_target, load_displacement_field(args.field))
    elif args.transform:
        moved = transform_landmarks(landmarks_target, load_affine(args.transform))
    else:
        moved = landmarks_target
    after = compute_tre(moved, landmarks_source)
    result = {
        'tre_before': before.mean,
        'tre_after': after.mean,
        'success': bool(classify_success(before, after)),
        'unit': 'px',
        'excluded': after.excluded,
    }
    logger.debug(f"TRE before: {before.to_dict()}, after: {after.to_dict()}")
    print(json.dumps(result))
    return EXIT_OK


def cmd_warp(args, logger):
    image = load_image(args.image)
    field = load_displacement_field(args.field)
    save_image(warp_into_frame(image, field), args.out)
    logger.info(f"Warped image written to '{args.out}'")
    return EXIT_OK


def cmd_ablate(args, logger):
    config = load_config(args.config)
    cfg = config.to_registration_config()
    pairs = []
    for record in load_pairs_manifest(args.pairs):
        pairs.append(AblationPair(
            source=load_image(record['source']),
            target=load_image(record['target']),
            landmarks_source=load_landmarks(record['landmarks_source']) if record['landmarks_source'] else None,
            landmarks_target=load_landmarks(record['landmarks_target']) if record['landmarks_target'] else None,
            subset=record['subset'],
            name=os.path.basename(str(record['source'])),
        ))
    matchers = [make_matcher(selection, cfg, config.matcher_timeout) for selection in args.matchers]
    rows = run_ablation(pairs, matchers, cfg, logger)
    write_ablation_csv(rows, args.out)
    print(format_ablation_table(rows))
    return EXIT_OK


def cmd_synth(args, logger):
    pair = make_synthetic_pair(seed=args.seed, size=args.size, rotation=args.rotation,
                               translation=(args.tx, args.ty), deform_amplitude=args.deform, scale=args.scale)
    os.makedirs(args.out, exist_ok=True)
    save_image(pair.he, os.path.join(args.out, 'source_he.png'))
    save_image(pair.shg, os.path.join(args.out, 'target_shg.png'))
    save_landmarks(pair.landmarks_source, os.path.join(args.out, 'landmarks_source.csv'))
    save_landmarks(pair.landmarks_target, os.path.join(args.out, 'landmarks_target.csv'))
    save_affine(pair.affine, os.path.join(args.out, 'ground_truth_transform.txt'))
    save_displacement_field(pair.field, os.path.join(args.out, 'ground_truth_field.mmdf'))
    logger.info(f"Synthetic pair (seed {args.seed}, {args.size}px) written to '{args.out}'")
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(
        description='Register H&E and SHG microscopy images: exhaustive initial alignment '
                    'followed by deformable instance optimization.',
        epilog='Example usage: python main.py register --source he.png --target shg.tif --out results/',
        formatter_class=argparse.RawTextHelpFormatter
    )
    parser.add_argument(
        '-l', '--log',
        type=str,
        default='mmreg.log',
        help='Path to the log file. Default: mmreg.log'
    )
    parser.add_argument(
        '-v', '--verbose',
        action='store_true',
        help='Show debug messages on the console.'
    )
    commands = parser.add_subparsers(dest='command', required=True)

    register = commands.add_parser('register', help='Register a source image onto a target image.')
    register.add_argument('--source', required=True, help='Source image (H&E by default).')
    register.add_argument('--target', required=True, help='Target image (SHG by default).')
    register.add_argument('--config', default=None, help='TOML configuration file.')
    register.add_argument('--out', default=None, help='Output directory. Default: output_dir from the config.')
    register.add_argument('--initial-only', action='store_true', help='Skip the deformable stage.')
    register.add_argument('--seed', type=int, default=None, help='Override the deterministic seed.')
    register.add_argument('--progress', action='store_true', help='Show a progress bar over candidates.')
    register.set_defaults(handler=cmd_register)

    evaluate = commands.add_parser('evaluate', help='Landmark TRE before and after a transform.')
    evaluate.add_argument('--landmarks-a', required=True, help='Landmarks in the target frame.')
    evaluate.add_argument('--landmarks-b', required=True, help='Corresponding landmarks in the source frame.')
    moving = evaluate.add_mutually_exclusive_group()
    moving.add_argument('--transform', default=None, help='Affine transform file.')
    moving.add_argument('--field', default=None, help='Displacement field file.')
    evaluate.set_defaults(handler=cmd_evaluate)

    warp = commands.add_parser('warp', help='Pull-warp an image through a displacement field.')
    warp.add_argument('--image', required=True)
    warp.add_argument('--field', required=True)
    warp.add_argument('--out', required=True)
    warp.set_defaults(handler=cmd_warp)

    ablate = commands.add_parser('ablate', help='Compare matchers over a manifest of pairs.')
    ablate.add_argument('--pairs', required=True, help='CSV manifest of registration pairs.')
    ablate.add_argument('--matchers', nargs='+', required=True, help="'builtin' or 'external:<command>'.")
    ablate.add_argument('--config', default=None, help='TOML configuration file.')
    ablate.add_argument('--out', required=True, help='Output CSV report.')
    ablate.set_defaults(handler=cmd_ablate)

    synth = commands.add_parser('synth', help='Generate a synthetic pair with ground truth.')
    synth.add_argument('--seed', type=int, default=0)
    synth.add_argument('--size', type=int, default=512)
    synth.add_argument('--rotation', type=float, default=0.0, help='Degrees. Default: 0')
    synth.add_argument('--tx', type=float, default=0.0)
    synth.add_argument('--ty', type=float, default=0.0)
    synth.add_argument('--deform', type=float, default=0.0, help='Sinusoidal field amplitude in pixels.')
    synth.add_argument('--scale', type=float, default=1.0, help='Uniform magnification of the target.')
    synth.add_argument('--out', required=True, help='Output directory.')
    synth.set_defaults(handler=cmd_synth)
    return parser


def main(argv=None):
    """
    Entry point of the command line.

    Parses arguments, sets up logging and dispatches the subcommand. Domain
    errors are reported as one `error: <kind>: <message>` line.

    Returns:
    - int: Process exit code.
    """
    args = build_parser().parse_args(argv)
    logger = setup_logging(log_file=args.log, verbose=args.verbose)
    logger.debug(f"Running '{args.command}'")
    try:
        return args.handler(args, logger)
    except DivergenceError as e:
        logger.error(f"Optimization diverged: {e}")
        print(f"error: numerical: {e}", file=sys.stderr)
        return EXIT_NUMERICAL
    except RegistrationError as e:
        kind = type(e).__name__.removesuffix("Error").lower() or "registration"
        logger.error(f"{type(e).__name__}: {e}")
        print(f"error: {kind}: {e}", file=sys.stderr)
        return EXIT_INPUT
    except OSError as e:
        logger.error(f"I/O failure: {e}")
        print(f"error: io: {e}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == '__main__':
    sys.exit(main())
