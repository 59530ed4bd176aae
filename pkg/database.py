import json
import os
import sqlite3
from dataclasses import asdict

DATABASE_PATH = os.environ.get('STUDY_DATABASE', 'data/studies.db')

# Level columns stored next to the full JSON row, for SQL filtering
LEVEL_COLUMNS = ('method', 'dim', 'level', 'n', 'h', 'n_dof',
                 'err_r', 'err_q', 'err_p', 'rate_r', 'rate_q', 'rate_p')


def get_db(path=None):
    """Get database connection."""
    path = path or DATABASE_PATH
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    conn = sqlite3.connect(path)
    conn.row_factory = sqlite3.Row
    conn.execute('PRAGMA foreign_keys = ON')
    return conn


def init_db(path=None):
    """Initialize database tables."""
    conn = get_db(path)
    cursor = conn.cursor()

    # One row per convergence study
    cursor.execute('''
        CREATE TABLE IF NOT EXISTS runs (
            id INTEGER PRIMARY KEY AUTOINCREMENT,
            dim INTEGER NOT NULL,
            methods TEXT NOT NULL,
            levels INTEGER NOT NULL,
            config TEXT NOT NULL,
            tolerances TEXT NOT NULL,
            failures TEXT NOT NULL DEFAULT '[]',
            wall_time REAL,
            created_at TIMESTAMP DEFAULT CURRENT_TIMESTAMP
        )
    ''')

    # One row per (run, method, level)
    cursor.execute('''
        CREATE TABLE IF NOT EXISTS levels (
            id INTEGER PRIMARY KEY AUTOINCREMENT,
            run_id INTEGER NOT NULL,
            method TEXT NOT NULL,
            dim INTEGER NOT NULL,
            level INTEGER NOT NULL,
            n INTEGER NOT NULL,
            h REAL NOT NULL,
            n_dof INTEGER NOT NULL,
            err_r REAL,
            err_q REAL,
            err_p REAL,
            rate_r REAL,
            rate_q REAL,
            rate_p REAL,
            payload TEXT NOT NULL,
            FOREIGN KEY (run_id) REFERENCES runs(id) ON DELETE CASCADE
        )
    ''')

    # Norm-equivalence interval recorded by the first run of each dimension
    cursor.execute('''
        CREATE TABLE IF NOT EXISTS norm_bounds (
            dim INTEGER PRIMARY KEY,
            lower REAL NOT NULL,
            upper REAL NOT NULL,
            created_at TIMESTAMP DEFAULT CURRENT_TIMESTAMP
        )
    ''')

    cursor.execute('CREATE INDEX IF NOT EXISTS idx_levels_run_id ON levels(run_id)')

    conn.commit()
    conn.close()


# ============ Runs ============

def save_report(report, path=None):
    """Store a ConvergenceReport and return the new run id."""
    init_db(path)
    config = asdict(report.config)
    conn = get_db(path)
    cursor = conn.cursor()
    cursor.execute(
        'INSERT INTO runs (dim, methods, levels, config, tolerances, failures, wall_time) '
        'VALUES (?, ?, ?, ?, ?, ?, ?)',
        (report.config.dim, ','.join(report.config.methods), report.config.levels,
         json.dumps(config), json.dumps(report.tolerances()),
         json.dumps(report.failures), report.wall_time)
    )
    run_id = cursor.lastrowid
    for row in report.rows:
        payload = asdict(row)
        cursor.execute(
            f'INSERT INTO levels (run_id, {", ".join(LEVEL_COLUMNS)}, payload) '
            f'VALUES (?, {", ".join("?" for _ in LEVEL_COLUMNS)}, ?)',
            (run_id, *(payload[c] for c in LEVEL_COLUMNS), json.dumps(payload))
        )
    conn.commit()
    conn.close()
    return run_id


def _run_dict(row):
    run = dict(row)
    for key in ('config', 'tolerances', 'failures'):
        run[key] = json.loads(run[key])
    return run


def get_runs(path=None):
    """All runs, newest first, without their level rows."""
    conn = get_db(path)
    cursor = conn.cursor()
    cursor.execute('''
        SELECT r.*, (SELECT COUNT(*) FROM levels WHERE run_id = r.id) as row_count
        FROM runs r
        ORDER BY r.id DESC
    ''')
    runs = [_run_dict(row) for row in cursor.fetchall()]
    conn.close()
    return runs


def get_run(run_id, path=None):
    """Run by id, or None."""
    conn = get_db(path)
    cursor = conn.cursor()
    cursor.execute('SELECT * FROM runs WHERE id = ?', (run_id,))
    row = cursor.fetchone()
    conn.close()
    return _run_dict(row) if row else None


def get_run_levels(run_id, path=None):
    """Level rows of a run in (level, method) insertion order."""
    conn = get_db(path)
    cursor = conn.cursor()
    cursor.execute('SELECT payload FROM levels WHERE run_id = ? ORDER BY id ASC', (run_id,))
    levels = [json.loads(row['payload']) for row in cursor.fetchall()]
    conn.close()
    return levels


def delete_run(run_id, path=None):
    """Delete a run and its level rows."""
    conn = get_db(path)
    cursor = conn.cursor()
    cursor.execute('DELETE FROM runs WHERE id = ?', (run_id,))
    conn.commit()
    deleted = cursor.rowcount > 0
    conn.close()
    return deleted


# ============ Norm equivalence ============

def get_norm_bounds(dim, path=None):
    """Recorded {'lower', 'upper'} interval for ``dim``, or None."""
    init_db(path)
    conn = get_db(path)
    cursor = conn.cursor()
    cursor.execute('SELECT lower, upper FROM norm_bounds WHERE dim = ?', (dim,))
    row = cursor.fetchone()
    conn.close()
    return dict(row) if row else None


def record_norm_bounds(dim, lower, upper, path=None):
    """Record the interval for ``dim`` unless one exists; returns the stored interval."""
    init_db(path)
    conn = get_db(path)
    cursor = conn.cursor()
    cursor.execute(
        'INSERT OR IGNORE INTO norm_bounds (dim, lower, upper) VALUES (?, ?, ?)',
        (dim, lower, upper)
    )
    conn.commit()
    conn.close()
    return get_norm_bounds(dim, path)
