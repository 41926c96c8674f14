import csv
import logging
from pathlib import Path

from django.core.management.base import CommandError

from radu.gradsuite import SUITES, run_suites

from ._common import RaduCommand

logger = logging.getLogger('radu')

REPORT_COLUMNS = ('suite', 'check', 'max_rel_error', 'checked', 'passed')


class Command(RaduCommand):
    help = 'Сверяет аналитические градиенты с центральными конечными разностями (f64)'

    def add_arguments(self, parser):
        parser.add_argument('--suite', nargs='+', choices=list(SUITES), default=list(SUITES))
        parser.add_argument('--seed', type=int, default=0)
        parser.add_argument('--report', help='CSV с результатами проверок')

    def run(self, suite, seed, report, **options):
        rows, failed = [], []
        for name in suite:
            for result in run_suites([name], seed):
                rows.append({'suite': name, 'check': result.name, 'max_rel_error': result.max_rel_error,
                             'checked': result.checked, 'passed': result.passed})
                if not result.passed:
                    failed.append(result.name)
        if report:
            report = Path(report)
            report.parent.mkdir(parents=True, exist_ok=True)
            with report.open('w', newline='', encoding='utf-8') as f:
                writer = csv.DictWriter(f, fieldnames=REPORT_COLUMNS)
                writer.writeheader()
                writer.writerows(rows)
        if failed:
            raise CommandError(f"Проверка градиентов не пройдена: {', '.join(failed)}", returncode=3)
        self.stdout.write(f"Все {len(rows)} проверок градиентов пройдены")
