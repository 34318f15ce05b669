from app.services.hoi.geometry import BBox, Detection, DetectionKind, HandInstance, ImageGeometry, hand_side


def hand(coords, confidence=0.9, width=640):
    bbox = BBox.from_list(coords)
    det = Detection(bbox, DetectionKind.HAND, 0, confidence)
    return HandInstance(det, hand_side(bbox, ImageGeometry(width, 480)))


def obj(coords, class_id=1, confidence=0.8):
    return Detection(BBox.from_list(coords), DetectionKind.OBJECT, class_id, confidence)
