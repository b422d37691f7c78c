"""Independent reference implementations used by the tests.

Nothing here imports package internals; each function is written from the
procedure it checks, step by step, so that agreement is meaningful.
"""
import json


def verify_by_steps(labels, confidences, threshold_min=0.87, threshold_gap=0.1, window=10):
    """Eleven-step aggregation/verification, one block per step, returned as sorted-key JSON."""
    # steps 1-3: bind predictions to their confidences, remembering arrival order
    bound = []
    for position in range(len(labels)):
        bound.append((labels[position], confidences[position], position))

    # step 4: highest confidence first; equal confidences by label, then arrival
    ordered = list(bound)
    for i in range(1, len(ordered)):
        j = i
        while j > 0:
            a, b = ordered[j - 1], ordered[j]
            if (a[1] < b[1]) or (a[1] == b[1] and (a[0] > b[0] or (a[0] == b[0] and a[2] > b[2]))):
                ordered[j - 1], ordered[j] = b, a
                j -= 1
            else:
                break
    head = ordered[:window]

    # step 5: most frequent type in the head, with its highest confidence
    seen = []
    for label, _, _ in head:
        if label not in seen:
            seen.append(label)
    most, most_count, most_conf = None, -1, None
    for label in seen:
        count = sum(1 for item in head if item[0] == label)
        conf = max(item[1] for item in head if item[0] == label)
        better = count > most_count or (
            count == most_count and (conf > most_conf or (conf == most_conf and label < most))
        )
        if better:
            most, most_count, most_conf = label, count, conf

    # step 6: the single most confident element
    highest_label, highest_conf = head[0][0], head[0][1]

    # step 7
    condition1 = most_conf > threshold_min
    # steps 8-9
    if highest_label == most:
        condition2 = True
    elif highest_conf - most_conf <= threshold_gap:
        condition2 = True
    else:
        condition2 = False
    # steps 10-11
    condition = condition1 and condition2
    record = {
        "request_id": None,
        "prediction": most,
        "verified": condition,
        "condition1": condition1,
        "condition2": condition2,
        "num_predictions": len(labels),
    }
    return json.dumps(record, sort_keys=True)

