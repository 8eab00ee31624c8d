from typing import Dict, List, Any

import numpy as np


class ModelDocumentValidator:
    """Structural checks for model JSON documents before typed construction.

    Collects every problem instead of stopping at the first; numerical
    constraints (row sums, signs) are left to core.validate_params.
    """

    def __init__(self):
        self.errors = []
        self.warnings = []

    def validate_model(self, data: Any) -> Dict[str, Any]:
        """Validate a {"order", "Q", "lambda", "pi"} document"""
        self.errors = []
        self.warnings = []

        if not isinstance(data, dict):
            self.errors.append("Model must be a JSON object")
            return self._create_validation_result()

        required_fields = ['order', 'Q', 'lambda', 'pi']
        for field in required_fields:
            if field not in data:
                self.errors.append(f"Missing required field: {field}")
            elif data[field] is None:
                self.errors.append(f"Required field cannot be null: {field}")

        extra = sorted(set(data) - set(required_fields))
        if extra:
            self.warnings.append(f"Ignoring unknown fields: {', '.join(extra)}")

        order = data.get('order')
        if 'order' in data and (isinstance(order, bool) or not isinstance(order, int) or order < 1):
            self.errors.append("order must be a positive integer")
            order = None

        self._validate_matrix(data.get('Q'), order)
        self._validate_vector(data.get('lambda'), 'lambda', order)
        self._validate_vector(data.get('pi'), 'pi', order)

        return self._create_validation_result()

    def _validate_matrix(self, rows: Any, order: Any):
        if rows is None:
            return
        if not isinstance(rows, list) or not all(isinstance(row, list) for row in rows):
            self.errors.append("Q must be a list of rows")
            return
        if order is not None and len(rows) != order:
            self.errors.append(f"Q has {len(rows)} rows, expected {order}")
        for i, row in enumerate(rows):
            if len(row) != len(rows):
                self.errors.append(f"Q row {i + 1} has {len(row)} entries, expected {len(rows)}")
            if not self._all_numbers(row):
                self.errors.append(f"Q row {i + 1} contains non-numeric or non-finite entries")

    def _validate_vector(self, values: Any, name: str, order: Any):
        if values is None:
            return
        if not isinstance(values, list):
            self.errors.append(f"{name} must be a list")
            return
        if order is not None and len(values) != order:
            self.errors.append(f"{name} has {len(values)} entries, expected {order}")
        if not self._all_numbers(values):
            self.errors.append(f"{name} contains non-numeric or non-finite entries")

    def _all_numbers(self, values: List[Any]) -> bool:
        return all(isinstance(v, (int, float)) and not isinstance(v, bool) and np.isfinite(v) for v in values)

    def _create_validation_result(self) -> Dict[str, Any]:
        """Create validation result"""
        return {
            'valid': len(self.errors) == 0,
            'errors': self.errors,
            'warnings': self.warnings,
            'error_count': len(self.errors),
            'warning_count': len(self.warnings)
        }


def validate_model_document(data: Any) -> Dict[str, Any]:
    """Convenience function to validate a model document"""
    validator = ModelDocumentValidator()
    return validator.validate_model(data)
