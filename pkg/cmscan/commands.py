import os, sys, copy, getopt, logging
import numpy as np
from PIL import Image
from joblib import Parallel, delayed
from matplotlib import colormaps
from threadpoolctl import threadpool_limits
from cmscan.numerics.tensor import ConfigurationError, DimensionError, NumericError
from cmscan.numerics.rng import Rng, STREAM_DATA
from cmscan.fusion.modelconfig import STAGE_STRIDES
from cmscan.fusion.trainer import evaluate_model
from cmscan.runtime.configsection import ConfigError
from cmscan.runtime.runconfig import RunConfig, load_config, write_config
from cmscan.runtime.checkpoint import CheckpointError, load_checkpoint, restore
from cmscan.runtime.jsonencoder import GlobalEncoder
from cmscan.runtime.logsetup import setup_logging
from cmscan.dataendpoint.scene import generate_scene
from cmscan.dataendpoint.loader import DatasetError, save_sample, write_provenance, MODALITIES
from cmscan.dataendpoint.dataendpoint import SPLITS, split_indices, sample_name,\
    DataEndpointSynthetic, DataEndpointDirectory, DataEndpointJsonLines
from cmscan.dataendpoint.dataendpointpool import DataEndpointPool
from cmscan.bench.flops import count_flops, params_count
from cmscan.bench.scaling import measure_runtime_scaling
from cmscan.bench import report
from cmscan.cmscan import CmScanTrainer, build_model, miou_record, METRICS_FILE

logger = logging.getLogger(__name__)

COMMANDS = ('gen-data', 'train', 'eval', 'predict', 'bench', 'ablate')
EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4
ABLATION_VARIANTS = ('addition', 'no_scan', 'cmssa', 'cmssa_zero_thermal')
ABLATION_SEEDS = 3
ABLATION_FILE = 'ablation.json'
EVAL_FILE = 'eval.json'

def print_usage():
    print('python3 -m cmscan command [--help] [--config=path] [--seed=N] [--out=dir] [--threads=N] [--log=level]')
    print('  gen-data [--count=N]                              write a synthetic dataset to --out')
    print('  train [--resume=ckpt]                             train, checkpoints and metrics go to --out')
    print('  eval --checkpoint=ckpt [--dataset=dir] [--split=name]')
    print('  predict --checkpoint=ckpt --rgb=png --thermal=png --output=png [--auto-resize]')
    print('  bench                                             FLOPs, parameters and runtime scaling')
    print('  ablate                                            fusion variants over ' + str(ABLATION_SEEDS) + ' seeds')
    print('If no level is specified, the environment variable CMSCAN_LOG will be used')

def prediction_palette(num_classes : int):
    """Stable class colors of predicted maps: class 0 black, then the tab20 colors in order
    ----------
    """
    colors = [(0, 0, 0)]
    table = colormaps['tab20'].colors
    for class_id in range(1, num_classes):
        colors.append(tuple(int(round(255 * c)) for c in table[(class_id - 1) % len(table)]))
    return colors

def build_loader(config : RunConfig, split : str, root : str = None):
    if root is not None: return DataEndpointDirectory(root=root, split=split)
    data = config.data
    if data.source == 'directory': return DataEndpointDirectory(root=data.root, split=split)
    return DataEndpointSynthetic(scene=data.scene, seed=config.seed, count=data.count, split=split, split_ratios=data.split_ratios)

def cmd_gen_data(config : RunConfig, out_dir : str = None, count : int = None, n_jobs : int = 1):
    """Write a synthetic dataset in the directory layout, plus spec.json
    ----------

    Parameters
    ----------
    config : RunConfig
        Seed, scene recipe and split ratios
    out_dir : str (optional)
        Dataset root, default to the run output directory
    count : int (optional)
        Samples over all splits, default to data.count

    Returns
    -------
    out_dir : str
        Dataset root
    """
    out_dir = config.output_dir if out_dir is None else os.path.abspath(out_dir)
    count = config.data.count if count is None else count
    if count < 0: raise ConfigurationError('count must be >= 0, got ' + str(count))
    scene, ratios = config.data.scene, config.data.split_ratios
    def write(split : str, index : int):
        sample = generate_scene(scene, Rng(config.seed).split(STREAM_DATA, index), name=sample_name(index))
        save_sample(sample, out_dir, split, sample_name(index))
    jobs = list()
    for split in SPLITS:
        for modality in MODALITIES: os.makedirs(os.path.join(out_dir, split, modality), exist_ok=True)
        jobs.extend((split, index) for index in split_indices(count, ratios, split))
    Parallel(n_jobs=n_jobs, prefer='threads')(delayed(write)(split, index) for split, index in jobs)
    write_provenance(out_dir, {'seed': config.seed, 'count': count, 'split_ratios': ratios, 'scene': scene}, encoder=GlobalEncoder)
    logger.info('Wrote %d samples to %s', count, out_dir)
    return out_dir

def cmd_train(config : RunConfig, resume : str = None, n_jobs : int = 1):
    """Train a model, writing checkpoints, the metrics stream and the resolved config
    ----------

    Returns
    -------
    summary : dict
        Final step, loss, mIoU and checkpoint path
    """
    os.makedirs(config.output_dir, exist_ok=True)
    saver = DataEndpointJsonLines(output_file=config.get_path(METRICS_FILE), encoder=GlobalEncoder, truncate=(resume is None))
    endpoint_pool = DataEndpointPool(loader=build_loader(config, 'train'), saver=saver, zero_thermal=config.data.zero_thermal, n_jobs=n_jobs)
    val_pool = DataEndpointPool(loader=build_loader(config, 'val'), saver=None, zero_thermal=config.data.zero_thermal)
    trainer = CmScanTrainer(config=config, endpoint_pool=endpoint_pool, val_pool=val_pool, resume=resume)
    return trainer.run()

def load_run(checkpoint_path : str):
    """Rebuild the model of a checkpoint and its run configuration
    ----------
    """
    checkpoint = load_checkpoint(checkpoint_path)
    try:
        config = RunConfig.from_dict(copy.deepcopy(checkpoint.config))
    except ConfigError as err:
        raise CheckpointError(checkpoint_path + ' carries an invalid config: ' + str(err))
    model = restore(checkpoint, build_model(config))
    return config, model, checkpoint

def cmd_eval(checkpoint_path : str, dataset : str = None, split : str = 'test', output : str = None):
    """Evaluate a checkpoint on one split, print per-class IoU and write them as JSON
    ----------

    Parameters
    ----------
    checkpoint_path : str
        Checkpoint to evaluate
    dataset : str (optional)
        Dataset root, default to the data source of the checkpoint config
    split : str
        Split to evaluate
    output : str (optional)
        JSON path, default to eval.json next to the checkpoint

    Returns
    -------
    result : dict
        miou, iou, pixel_accuracy, split, step
    """
    if dataset is not None and not os.path.isdir(dataset): raise DatasetError('Missing dataset directory ' + dataset)
    config, model, checkpoint = load_run(checkpoint_path)
    pool = DataEndpointPool(loader=build_loader(config, split, root=dataset), saver=None, zero_thermal=config.data.zero_thermal)
    if pool.get_size() > 0:
        height, width = pool.loader.load_sample(0).get_size()
        config.model.check_input_size(height, width)
    result = miou_record(evaluate_model(model, pool.iterate_batches(config.train.batch_size)))
    result.update({'split': split, 'step': checkpoint.step, 'samples': pool.get_size()})
    output = os.path.join(os.path.dirname(os.path.abspath(checkpoint_path)), EVAL_FILE) if output is None else output
    report.write_json(result, output)
    report.print_table(report.metrics_table(result['miou'], result['iou'], result['pixel_accuracy'], title='Evaluation on ' + split))
    return result

def _read_image(path : str):
    with Image.open(path) as image: return np.asarray(image.convert('RGB'), dtype=np.float32) / 255.0

def cmd_predict(checkpoint_path : str, rgb_path : str, thermal_path : str, output : str, auto_resize : bool = False):
    """Segment one image pair and write the class map as a palette PNG
    ----------

    Parameters
    ----------
    auto_resize : bool
        Resize inputs to the nearest multiple of 32 instead of refusing them

    Returns
    -------
    labels : np.ndarray
        [H, W] class map at the input size
    """
    config, model, _ = load_run(checkpoint_path)
    rgb, thermal = _read_image(rgb_path), _read_image(thermal_path)
    if rgb.shape != thermal.shape: raise DimensionError('RGB image ' + str(rgb.shape[:2]) + ' and thermal image ' + str(thermal.shape[:2]) + ' differ')
    height, width = rgb.shape[:2]
    stride = STAGE_STRIDES[-1]
    resized = (max(stride, int(round(height / stride)) * stride), max(stride, int(round(width / stride)) * stride))
    if resized != (height, width):
        if not auto_resize: config.model.check_input_size(height, width)
        logger.warning('Resizing inputs from %s to %s', (height, width), resized)
        to_size = lambda image: np.asarray(Image.fromarray(np.round(image * 255).astype(np.uint8)).resize(resized[::-1], Image.Resampling.BILINEAR), dtype=np.float32) / 255.0
        rgb, thermal = to_size(rgb), to_size(thermal)
    labels = model.predict(rgb.transpose(2, 0, 1), thermal.transpose(2, 0, 1))
    image = Image.fromarray(labels, mode='P')
    if labels.shape != (height, width): image = image.resize((width, height), Image.Resampling.NEAREST)
    image.putpalette([channel for color in prediction_palette(config.model.num_classes) for channel in color])
    os.makedirs(os.path.dirname(os.path.abspath(output)), exist_ok=True)
    image.save(output)
    logger.info('Prediction written to %s', output)
    return np.asarray(image)

def cmd_bench(config : RunConfig):
    """FLOPs and parameter counts of the configured model, runtime scaling of the cross-modal scan
    against naive cross-attention
    ----------

    Returns
    -------
    result : dict
        flops report, params, both scaling reports and the slope gap
    """
    bench, canvas = config.bench, config.data.scene.canvas
    flops = count_flops(config.model, canvas, canvas)
    params = params_count(build_model(config))
    if params != flops.get_total_params():
        logger.warning('Analytic parameter total %d differs from the model (%d)', flops.get_total_params(), params)
    settings = {'reps': bench.reps, 'warmup': bench.warmup, 'seed': config.seed, 'channels': bench.channels, 'state_dim': bench.state_dim}
    scan = measure_runtime_scaling('cm_ss2d', bench.scan_sizes, parallel=bench.parallel, **settings)
    attention = measure_runtime_scaling('attention', bench.attention_sizes, **settings)
    result = {'input_size': [canvas, canvas], 'flops': flops, 'params': params,\
        'scaling': {'cm_ss2d': scan, 'attention': attention}, 'slope_gap': attention.slope - scan.slope}
    write_config(config)
    report.write_json(result, config.get_path(report.BENCH_FILE))
    if bench.plot: report.plot_scaling([scan, attention], config.get_path(report.PLOT_FILE))
    report.print_table(report.flops_table(flops, title='FLOPs at ' + str(canvas) + 'x' + str(canvas)))
    report.print_table(report.scaling_table([scan, attention]))
    logger.info('Slope gap (attention - cm_ss2d): %.3f', result['slope_gap'])
    return result

def variant_config(config : RunConfig, variant : str, seed : int):
    data = config.to_dict()
    data['seed'] = seed
    data['output_dir'] = os.path.join(config.output_dir, variant, 'seed' + str(seed))
    data['model']['fusion'] = 'cmssa' if variant == 'cmssa_zero_thermal' else variant
    data['data']['zero_thermal'] = (variant == 'cmssa_zero_thermal')
    return RunConfig.from_dict(data)

def cmd_ablate(config : RunConfig, n_jobs : int = 1):
    """Train every fusion variant (and a thermal-zeroed cmssa) on seeds seed..seed+2, evaluate them on
    the test split and check the mIoU orderings
    ----------

    Returns
    -------
    result : dict
        Per-variant mIoU per seed and mean, orderings
    """
    seeds = [config.seed + offset for offset in range(ABLATION_SEEDS)]
    scores = {variant: list() for variant in ABLATION_VARIANTS}
    for seed in seeds:
        for variant in ABLATION_VARIANTS:
            run = variant_config(config, variant, seed)
            logger.info('Ablation: %s, seed %d', variant, seed)
            summary = cmd_train(run, n_jobs=n_jobs)
            evaluated = cmd_eval(summary['checkpoint'], split='test')
            scores[variant].append(evaluated['miou'])
    means = {variant: float(np.mean(values)) for variant, values in scores.items()}
    result = {'seeds': seeds, 'miou': scores, 'mean_miou': means,\
        'thermal_gain': means['cmssa'] - means['cmssa_zero_thermal'],\
        'cmssa_ge_no_scan': means['cmssa'] >= means['no_scan'],\
        'no_scan_ge_addition': means['no_scan'] >= means['addition'],\
        'cmssa_gt_addition': means['cmssa'] > means['addition']}
    write_config(config)
    report.write_json(result, config.get_path(ABLATION_FILE))
    report.print_table(report.ablation_table(means, title='Ablation (test mIoU over seeds ' + str(seeds) + ')'))
    return result

def main(argv : list):
    """Parse a command line, run the command and map failures to exit codes
    ----------

    Returns
    -------
    code : int
        0 success, 2 config or usage error, 3 I/O error, 4 numeric failure
    """
    short_options = 'hc:s:o:r:t:n:'
    long_options = ['help', 'config=', 'seed=', 'out=', 'resume=', 'threads=', 'count=', 'checkpoint=', 'dataset=',\
        'split=', 'rgb=', 'thermal=', 'output=', 'auto-resize', 'log=']
    try:
        arguments, values = getopt.gnu_getopt(argv, short_options, long_options)
    except getopt.error as err:
        print(str(err), file=sys.stderr)
        print_usage()
        return EXIT_USAGE
    options = dict()
    for current_argument, current_value in arguments:
        if current_argument in ('-h', '--help'):
            print_usage()
            return EXIT_OK
        options[current_argument.lstrip('-')] = current_value
    aliases = {'c': 'config', 's': 'seed', 'o': 'out', 'r': 'resume', 't': 'threads', 'n': 'count'}
    options = {aliases.get(key, key): value for key, value in options.items()}
    if len(values) != 1 or values[0] not in COMMANDS:
        print('Expected exactly one command among ' + ', '.join(COMMANDS) + ', got ' + str(values), file=sys.stderr)
        print_usage()
        return EXIT_USAGE
    command = values[0]

    try:
        setup_logging(options.get('log'))
        threads = int(options.get('threads') or os.getenv('CMSCAN_THREADS') or 1)
        seed = int(options['seed']) if 'seed' in options else None
        if threads < 1: raise ConfigurationError('threads must be >= 1, got ' + str(threads))

        ###########################################
        # Commands working from a checkpoint
        ###########################################
        with threadpool_limits(limits=threads):
            if command == 'eval':
                if 'checkpoint' not in options: raise ConfigurationError('eval needs --checkpoint')
                cmd_eval(options['checkpoint'], dataset=options.get('dataset'), split=options.get('split', 'test'), output=options.get('output'))
                return EXIT_OK
            if command == 'predict':
                missing = [key for key in ('checkpoint', 'rgb', 'thermal', 'output') if key not in options]
                if missing: raise ConfigurationError('predict needs --' + ', --'.join(missing))
                cmd_predict(options['checkpoint'], options['rgb'], options['thermal'], options['output'], auto_resize=('auto-resize' in options))
                return EXIT_OK

            ###########################################
            # Commands working from a run configuration
            ###########################################
            config = load_config(options.get('config'), seed=seed, output_dir=options.get('out'))
            if command == 'gen-data':
                cmd_gen_data(config, count=int(options['count']) if 'count' in options else None, n_jobs=threads)
            elif command == 'train':
                cmd_train(config, resume=options.get('resume'), n_jobs=threads)
            elif command == 'bench':
                cmd_bench(config)
            elif command == 'ablate':
                cmd_ablate(config, n_jobs=threads)
        return EXIT_OK
    except NumericError as err:
        logger.error('Numeric failure: %s', err)
        return EXIT_NUMERIC
    except (ConfigurationError, DimensionError) as err:
        logger.error('Invalid configuration: %s', err)
        return EXIT_USAGE
    except OSError as err:
        logger.error('I/O error: %s', err)
        return EXIT_IO
    except ValueError as err:
        logger.error('Invalid argument: %s', err)
        return EXIT_USAGE
