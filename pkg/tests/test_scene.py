import textwrap

import pytest
import yaml

from fidslam.errors import NonPositiveSize, ParseError, ValidationError
from fidslam.scene import (PosePrior, Settings, TagSpec, dump_scene, load_scene, resolve_tag, scene_to_dict,
                           validate_solvability)
from fidslam.se3 import Pose

MINIMAL = textwrap.dedent("""
    format: fidslam-scene/1
    bodies:
      - name: lab
        kind: static
        prior: {position: [0, 0, 0], rotation: [0, 0, 0, 1]}
    cameras:
      - name: cam0
        rig: lab
        intrinsics: {fx: 600, fy: 600, cx: 320, cy: 240, width: 640, height: 480}
        extrinsic_prior: {position: [0, 0, 1], rotation: [0, 0, 0, 1]}
""")


def doc_with(**changes):
    d = yaml.safe_load(MINIMAL)
    d.update(changes)
    return d


def test_minimal_config():
    s = load_scene(MINIMAL)
    assert list(s.bodies) == ["lab"]
    assert s.cameras["cam0"].extrinsic_prior.pose.t.tolist() == [0, 0, 1]
    assert s.settings == Settings()


def test_duplicate_tag_id():
    d = doc_with(tags=[{"id": 7, "size": 0.1, "body": "lab"}, {"id": 7, "size": 0.2, "body": "lab"}])
    with pytest.raises(ValidationError, match="duplicate tag id 7") as e:
        load_scene(d)
    assert e.value.path == "tags[1].id"


def test_unknown_body_reference():
    d = doc_with(tags=[{"id": 1, "size": 0.1, "body": "nowhere"}])
    with pytest.raises(ValidationError) as e:
        load_scene(d)
    assert e.value.path == "tags[0].body"


@pytest.mark.parametrize("size", [0, -0.5])
def test_nonpositive_tag_size(size):
    with pytest.raises(NonPositiveSize):
        load_scene(doc_with(tags=[{"id": 1, "size": size, "body": "lab"}]))


def test_malformed_yaml():
    with pytest.raises(ParseError):
        load_scene("bodies: [unclosed\n")


def test_dynamic_body_prior_rejected():
    d = doc_with(bodies=[{"name": "rig", "kind": "dynamic", "prior": {"position": [0, 0, 0]}}])
    with pytest.raises(ValidationError):
        load_scene(d)


def test_two_default_bodies_rejected():
    d = doc_with(bodies=[{"name": "a", "default_tag_body": True}, {"name": "b", "default_tag_body": True}],
                 cameras=[], settings={"default_tag_size": 0.1})
    with pytest.raises(ValidationError, match="default tag body"):
        load_scene(d)


def test_default_body_requires_size():
    d = doc_with(bodies=[{"name": "lab", "default_tag_body": True}], cameras=[])
    with pytest.raises(ValidationError) as e:
        load_scene(d)
    assert e.value.path == "settings.default_tag_size"


def test_unknown_setting_rejected():
    with pytest.raises(ValidationError):
        load_scene(doc_with(settings={"not_a_setting": 1}))


def test_block_scene_prior_structure(block_scene_path):
    s = load_scene(block_scene_path)
    assert {n: b.kind for n, b in s.bodies.items()} == {"lab": "static", "rig": "dynamic", "block": "dynamic"}
    n_priors = (sum(b.prior is not None for b in s.bodies.values())
                + sum(t.prior is not None for t in s.tags.values())
                + sum(c.extrinsic_prior is not None for c in s.cameras.values()))
    # lab world pose, tag 2 on lab, tag 105 on block, camera in rig
    assert n_priors == 4
    assert {t.id for t in s.tags.values() if t.prior is not None} == {2, 105}


def test_resolve_known_tag(block_scene_path):
    s = load_scene(block_scene_path)
    assert resolve_tag(s, 2) is s.tags[2]


def test_resolve_unknown_tag_on_default_body():
    s = load_scene(doc_with(bodies=[{"name": "lab", "default_tag_body": True,
                                     "prior": {"position": [0, 0, 0]}}],
                            settings={"default_tag_size": 0.16}))
    assert resolve_tag(s, 99) == TagSpec(99, 0.16, "lab", None)
    assert 99 not in s.tags


def test_resolve_unknown_tag_without_default(block_scene_path):
    assert resolve_tag(load_scene(block_scene_path), 99) is None


def test_solvability_zero_priors():
    d = doc_with(bodies=[{"name": "lab"}])
    warnings = validate_solvability(load_scene(d))
    assert any("gauge not fixed" in w for w in warnings)


def test_solvability_block_scene_clean(block_scene_path):
    assert validate_solvability(load_scene(block_scene_path)) == []


def test_camera_without_extrinsics_but_known_rig_tags():
    d = doc_with(
        bodies=[{"name": "lab", "prior": {"position": [0, 0, 0]}}, {"name": "rig", "kind": "dynamic"}],
        tags=[{"id": 1, "size": 0.1, "body": "rig", "prior": {"position": [0, 0, 0]}}],
        cameras=[{"name": "c", "rig": "rig",
                  "intrinsics": {"fx": 600, "fy": 600, "cx": 320, "cy": 240, "width": 640, "height": 480}}])
    assert validate_solvability(load_scene(d)) == []


def test_roundtrip(block_scene_path):
    s = load_scene(block_scene_path)
    assert load_scene(dump_scene(s)) == s
    assert load_scene(scene_to_dict(s)) == s


def test_load_is_deterministic(block_scene_path):
    assert dump_scene(load_scene(block_scene_path)) == dump_scene(load_scene(block_scene_path))


def test_prior_noise_validation():
    with pytest.raises(ValidationError):
        PosePrior(Pose(), (1, 1, 1))
    with pytest.raises(ValidationError):
        PosePrior(Pose(), (1, 1, 1, 1, 1, 0))


def test_ambiguity_rule_validated():
    with pytest.raises(ValidationError):
        load_scene(doc_with(settings={"ambiguity_rule": "sometimes"}))
