import os

from dotenv import load_dotenv
from flask import Flask, Response, jsonify

load_dotenv()

import database as db
from report import render_csv, render_markdown

app = Flask(__name__)
app.json.sort_keys = False


def _load(run_id):
    """Run with its level rows, or None."""
    run = db.get_run(run_id)
    if run is None:
        return None
    run['levels'] = db.get_run_levels(run_id)
    return run


# Security and caching headers
@app.after_request
def add_headers(response):
    response.headers['X-Content-Type-Options'] = 'nosniff'
    response.headers['X-Frame-Options'] = 'SAMEORIGIN'
    response.headers['Referrer-Policy'] = 'strict-origin-when-cross-origin'
    response.headers['Cache-Control'] = 'no-store'
    return response


@app.route('/')
def index():
    """List the available endpoints."""
    return jsonify({
        'runs': '/api/runs',
        'run': '/api/runs/<id>',
        'csv': '/runs/<id>.csv',
        'markdown': '/runs/<id>.md',
    })


@app.route('/api/runs', methods=['GET'])
def get_runs():
    """All stored convergence runs, newest first."""
    return jsonify({'runs': db.get_runs()})


@app.route('/api/runs/<int:run_id>', methods=['GET'])
def get_run(run_id):
    """One run with its level rows."""
    run = _load(run_id)
    if run is None:
        return jsonify({'error': 'Run not found'}), 404
    return jsonify(run)


@app.route('/runs/<int:run_id>.csv', methods=['GET'])
def get_run_csv(run_id):
    run = _load(run_id)
    if run is None:
        return jsonify({'error': 'Run not found'}), 404
    response = Response(render_csv(run['levels']), mimetype='text/csv')
    response.headers['Content-Disposition'] = f'inline; filename=run_{run_id}.csv'
    return response


@app.route('/runs/<int:run_id>.md', methods=['GET'])
def get_run_markdown(run_id):
    run = _load(run_id)
    if run is None:
        return jsonify({'error': 'Run not found'}), 404
    text = render_markdown(run['levels'], run['tolerances'], run['failures'],
                           title=f"Convergence study #{run_id} ({run['dim']}D)")
    return Response(text, mimetype='text/markdown')


# ============ Error Handlers ============

@app.errorhandler(404)
def not_found(e):
    return jsonify({'error': 'Not found'}), 404


@app.errorhandler(500)
def internal_error(e):
    return jsonify({'error': 'Internal server error'}), 500


# Initialize database on module import (works with gunicorn)
db.init_db()


if __name__ == '__main__':
    app.run(host='0.0.0.0', port=int(os.environ.get('PORT', '5000')), debug=False)
