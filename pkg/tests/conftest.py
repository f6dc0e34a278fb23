from fbi.corpus import PredictionTable


def make_table(columns, k=1, inputs=None, ground_truth=None):
    """Build a PredictionTable from model id -> list of top-k tuples."""
    models = list(columns)
    n = len(next(iter(columns.values())))
    inputs = inputs or [f"x{i}" for i in range(n)]
    cells = {(m, x): tuple(columns[m][i]) for m in models for i, x in enumerate(inputs)}
    return PredictionTable(models, inputs, k, cells, ground_truth=ground_truth)
