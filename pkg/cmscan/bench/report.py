import os, json, logging
import numpy as np
import matplotlib
matplotlib.use('Agg')
import matplotlib.pyplot as plt
from rich.console import Console
from rich.table import Table
from cmscan.runtime.jsonencoder import GlobalEncoder
from cmscan.bench.flops import FlopsReport

logger = logging.getLogger(__name__)

BENCH_FILE = 'bench.json'
PLOT_FILE = 'scaling.png'

def flops_table(report : FlopsReport, title : str = 'FLOPs', group_depth : int = 1):
    """Aligned table of a FlopsReport, entries grouped on the first group_depth name components
    ----------
    """
    groups = dict()
    for entry in report.entries:
        key = '.'.join(entry.name.split('.')[:group_depth])
        flops, params = groups.get(key, (0, 0))
        groups[key] = (flops + entry.flops, params + entry.params)
    table = Table(title=title)
    table.add_column('component')
    table.add_column('flops', justify='right')
    table.add_column('params', justify='right')
    for key, (flops, params) in groups.items(): table.add_row(key, f'{flops:,}', f'{params:,}')
    table.add_row('total', f'{report.get_total_flops():,}', f'{report.get_total_params():,}', style='bold')
    return table

def scaling_table(reports : list, title : str = 'Runtime scaling'):
    table = Table(title=title)
    table.add_column('op')
    table.add_column('H*W', justify='right')
    table.add_column('median (s)', justify='right')
    table.add_column('slope', justify='right')
    for report in reports:
        for index, (size, median) in enumerate(zip(report.sizes, report.medians)):
            table.add_row(report.op if index == 0 else '', str(size), f'{median:.6f}', f'{report.slope:.3f}' if index == 0 else '')
    return table

def metrics_table(miou : float, per_class : list, pixel_accuracy : float = None, title : str = 'Evaluation'):
    table = Table(title=title)
    table.add_column('class', justify='right')
    table.add_column('IoU', justify='right')
    for class_id, value in enumerate(per_class):
        table.add_row(str(class_id), 'n/a' if value is None or np.isnan(value) else f'{value:.4f}')
    table.add_row('mIoU', f'{miou:.4f}', style='bold')
    if pixel_accuracy is not None: table.add_row('pixel acc.', f'{pixel_accuracy:.4f}')
    return table

def print_table(table : Table):
    Console().print(table)

def write_json(data : dict, path : str):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, 'w') as f: f.write(json.dumps(data, indent=2, sort_keys=True, cls=GlobalEncoder))
    return path

def plot_scaling(reports : list, path : str):
    """Log-log plot of median runtime against H*W, one line per op with its fitted slope
    ----------
    """
    figure, axis = plt.subplots(figsize=(6, 4))
    for report in reports:
        sizes = np.asarray(report.sizes, dtype=np.float64)
        axis.loglog(sizes, report.medians, marker='o', label=report.op + ' (slope ' + format(report.slope, '.2f') + ')')
        axis.loglog(sizes, np.exp(report.intercept) * sizes ** report.slope, linestyle='--', color='gray', linewidth=0.8)
    axis.set_xlabel('H*W')
    axis.set_ylabel('median runtime (s)')
    axis.legend()
    figure.tight_layout()
    figure.savefig(path)
    plt.close(figure)
    logger.info('Scaling plot written to %s', path)
    return path

def ablation_table(means : dict, title : str = 'Ablation'):
    table = Table(title=title)
    table.add_column('variant')
    table.add_column('mean mIoU', justify='right')
    for variant, miou in means.items(): table.add_row(variant, f'{miou:.4f}')
    return table
