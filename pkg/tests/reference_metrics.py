"""逐项按定义实现的参考指标，只用于测试比对"""


def reference_ap(records, n_gt):
    if n_gt == 0:
        return 0.0 if records else 1.0
    ranked = [r for _, r in sorted(enumerate(records), key=lambda item: (-item[1][0], item[0]))]
    precisions = []
    tp = 0
    for rank, (_, ok) in enumerate(ranked, start=1):
        tp += 1 if ok else 0
        precisions.append((ok, tp / rank))
    total = 0.0
    for i, (ok, _) in enumerate(precisions):
        if ok:
            total += max(p for _, p in precisions[i:])
    return total / n_gt


def reference_point_match(predictions, gt_frames, threshold):
    """返回按处理顺序排列的 (置信度, 是否TP)"""
    order = sorted(range(len(predictions)), key=lambda i: (-predictions[i].confidence, i))
    free = list(range(len(gt_frames)))
    out = []
    for i in order:
        p = predictions[i]
        candidates = [g for g in free if abs(gt_frames[g] - p.frame_index) <= threshold]
        if not candidates:
            out.append((p.confidence, False))
            continue
        best = min(candidates, key=lambda g: (abs(gt_frames[g] - p.frame_index), gt_frames[g]))
        free.remove(best)
        out.append((p.confidence, True))
    return out


def _area(b):
    return max(0.0, b[2] - b[0]) * max(0.0, b[3] - b[1])


def _iou(a, b):
    inter = max(0.0, min(a[2], b[2]) - max(a[0], b[0])) * max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    union = _area(a) + _area(b) - inter
    return inter / union if union > 0 else 0.0


def reference_hoi_ap(events, gt_frames, box_iou=0.5):
    """events/gt_frames 为普通字典，返回四项 AP"""
    gt_by_frame = {g["frame_index"]: g for g in gt_frames}
    flat = []
    for event in events:
        for hi, h in enumerate(event["hands"]):
            flat.append((event, hi, h))
    order = sorted(range(len(flat)), key=lambda i: (-flat[i][2]["confidence"], i))
    used = {f: set() for f in gt_by_frame}
    rows = {"hand": [], "state": [], "side": [], "all": []}
    for i in order:
        event, hi, h = flat[i]
        frame = gt_by_frame[event["frame_index"]]
        best, best_iou = None, -1.0
        for gi, g in enumerate(frame["hands"]):
            if gi in used[event["frame_index"]]:
                continue
            v = _iou(h["bbox"], g["bbox"])
            if v > best_iou:
                best, best_iou = gi, v
        conf = h["confidence"]
        if best is None or best_iou < box_iou:
            for key in rows:
                rows[key].append((conf, False))
            continue
        used[event["frame_index"]].add(best)
        g = frame["hands"][best]
        is_matched = event["contact_state"] == "contact" and event["matched_hand"] == hi
        predicted_state = "contact" if is_matched else "no_contact"
        state_ok = predicted_state == g["state"]
        side_ok = h["side"] == g["side"]
        linked = [o for o in frame["active_objects"] if o["hand_side"] == g["side"]]
        object_ok = True
        if g["state"] == "contact" and linked:
            pred_obj = event["active_object"] if is_matched else None
            object_ok = pred_obj is not None and any(
                o["class_id"] == pred_obj["class_id"] and _iou(pred_obj["bbox"], o["bbox"]) >= box_iou for o in linked
            )
        rows["hand"].append((conf, True))
        rows["state"].append((conf, state_ok))
        rows["side"].append((conf, side_ok))
        rows["all"].append((conf, state_ok and side_ok and object_ok))
    n_gt = sum(len(g["hands"]) for g in gt_frames)
    return {key: reference_ap(value, n_gt) for key, value in rows.items()}
