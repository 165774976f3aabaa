import pytest

from eligo import errors
from eligo.conversion import (
    build_conversion_prompt,
    convert_criterion,
    generate_questions,
    merge_question_sets,
    normalize_question_text,
)
from eligo.corpus import Category, CriterionKind, CriterionSpec, TaskType
from eligo.gateway import BackendConfig, Gateway
from eligo.rules import parse_rule, referenced_ids

from conftest import make_mock_gateway

LIVER_QUESTION_TEXTS = [
    "Has the patient been diagnosed with a malignant liver tumor?",
    "Is the pathological type of the liver tumor hepatocellular carcinoma?",
    "Has the patient been diagnosed with mixed hepatocellular carcinoma?",
    "Is there any mention that the liver tumor metastasized from another site?",
]

LIVER_DRAFT_REPLY = "\n".join(
    [f"Q: {text}" for text in LIVER_QUESTION_TEXTS]
    + ["RULE: Q1 IS YES AND (Q2 IS YES OR Q3 IS YES) AND Q4 IS NOT YES"]
)


def liver_criterion(criterion_id="C1"):
    return CriterionSpec(
        criterion_id=criterion_id,
        trial_ids=("T1",),
        kind=CriterionKind.INCLUSION,
        text="Has the patient been diagnosed with primary liver cancer?",
        rule_text="",
        question_ids=(),
        needs_human_rule=True,
    )


def drafting_gateway(reply, model_name="assistant-1", criterion_id="C1"):
    cfg = BackendConfig(kind="mock", model_name=model_name, backoff_s=0.0)
    return Gateway(cfg, fixtures={f"convert|{criterion_id}|{model_name}": reply})


def refining_gateway(reply, criterion_id="C1"):
    cfg = BackendConfig(kind="mock", model_name="refiner", backoff_s=0.0)
    return Gateway(cfg, fixtures={f"refine|{criterion_id}": reply})


class _FailingTransport:
    def send(self, req):
        raise errors.BackendError("backend refused the request", status=400,
                                  body_excerpt="bad request")


def failing_gateway(model_name):
    gateway = make_mock_gateway({})
    gateway.cfg = BackendConfig(kind="mock", model_name=model_name)
    gateway.transport = _FailingTransport()
    return gateway


class TestBuildPrompt:
    def test_embeds_criterion_verbatim(self):
        req = build_conversion_prompt(liver_criterion())
        prompt = req.messages[-1].content
        assert "Has the patient been diagnosed with primary liver cancer?" in prompt
        assert "RULE" in prompt and "ANY" in prompt  # grammar embedded

    def test_empty_text_rejected(self):
        empty = CriterionSpec("Cx", (), CriterionKind.INCLUSION, "  ", "", (),
                              needs_human_rule=True)
        with pytest.raises(errors.CatalogError):
            build_conversion_prompt(empty)

    def test_deterministic(self):
        assert build_conversion_prompt(liver_criterion()) == \
            build_conversion_prompt(liver_criterion())


class TestGenerateQuestions:
    def test_liver_reply_yields_four_drafts(self):
        result = generate_questions(liver_criterion(), [drafting_gateway(LIVER_DRAFT_REPLY)])
        assert [draft.text for draft in result.drafts] == LIVER_QUESTION_TEXTS
        assert result.rule_proposals["assistant-1"].startswith("Q1 IS YES")

    def test_no_q_lines_warns(self):
        result = generate_questions(
            liver_criterion(), [drafting_gateway("I would rather chat about weather.")]
        )
        assert result.drafts == []
        assert any("no Q: lines" in warning for warning in result.warnings)

    def test_two_backends_overlap_counts(self):
        first = drafting_gateway("\n".join(f"Q: {t}" for t in LIVER_QUESTION_TEXTS),
                                 model_name="a1")
        second_texts = LIVER_QUESTION_TEXTS[:2] + [
            "Is the liver tumor described as recurrent?",
        ]
        second = drafting_gateway("\n".join(f"Q: {t}" for t in second_texts),
                                  model_name="a2")
        result = generate_questions(liver_criterion(), [first, second])
        # 4 + 3 drafts before merge; the 2 shared ones collapse later.
        assert len(result.drafts) == 7

    def test_one_backend_failing_is_tolerated(self):
        result = generate_questions(
            liver_criterion(),
            [failing_gateway("dead"), drafting_gateway(LIVER_DRAFT_REPLY)],
        )
        assert len(result.drafts) == 4
        assert any("backend failed" in warning for warning in result.warnings)

    def test_all_backends_failing_raises(self):
        with pytest.raises(errors.ConversionError) as excinfo:
            generate_questions(
                liver_criterion(), [failing_gateway("d1"), failing_gateway("d2")]
            )
        assert len(excinfo.value.causes) == 2


class TestMerge:
    def test_exact_duplicates_collapse(self):
        reply = ("Q: Is the pathological type hepatocellular carcinoma?\n"
                 "Q: Is the pathological type hepatocellular carcinoma?\n"
                 "RULE: Q1 IS YES")
        drafts = generate_questions(liver_criterion(), [drafting_gateway(reply)]).drafts
        assert len(drafts) == 2
        merged = merge_question_sets(
            drafts,
            refining_gateway("Q: Is the pathological type hepatocellular carcinoma?\n"
                             "RULE: Q1 IS YES"),
            liver_criterion(),
        )
        assert len(merged.questions) == 1

    def test_normalization_covers_case_space_punctuation(self):
        assert normalize_question_text("Is it  HCC?") == normalize_question_text(
            "is it hcc"
        )

    def test_liver_merge_produces_catalog_entry(self):
        criterion = liver_criterion()
        drafts = generate_questions(criterion, [drafting_gateway(LIVER_DRAFT_REPLY)])
        merged = merge_question_sets(
            drafts.drafts, refining_gateway(LIVER_DRAFT_REPLY), criterion,
            rule_proposals=drafts.rule_proposals,
        )
        assert [question.question_id for question in merged.questions] == [
            "C1.q1", "C1.q2", "C1.q3", "C1.q4",
        ]
        assert merged.needs_human_rule is False
        expr = parse_rule(merged.rule_text)
        assert referenced_ids(expr) == {"C1.q1", "C1.q2", "C1.q3", "C1.q4"}

    def test_unparsable_rule_keeps_questions(self):
        merged = merge_question_sets(
            generate_questions(liver_criterion(),
                               [drafting_gateway(LIVER_DRAFT_REPLY)]).drafts,
            refining_gateway("Q: Only question?\nRULE: Q1 FROBNICATES"),
            liver_criterion(),
        )
        assert len(merged.questions) == 1
        assert merged.rule_text == ""
        assert merged.needs_human_rule is True
        assert any("rule" in warning for warning in merged.warnings)

    def test_rule_referencing_unlisted_question_rejected(self):
        merged = merge_question_sets(
            generate_questions(liver_criterion(),
                               [drafting_gateway(LIVER_DRAFT_REPLY)]).drafts,
            refining_gateway("Q: Single question?\nRULE: Q1 IS YES AND Q9 IS NO"),
            liver_criterion(),
        )
        assert merged.needs_human_rule is True

    def test_refiner_without_questions_raises(self):
        with pytest.raises(errors.RefinementParseError):
            merge_question_sets(
                generate_questions(liver_criterion(),
                                   [drafting_gateway(LIVER_DRAFT_REPLY)]).drafts,
                refining_gateway("Nothing useful."),
                liver_criterion(),
            )

    def test_refiner_labels_respected(self):
        merged = merge_question_sets(
            generate_questions(liver_criterion(),
                               [drafting_gateway(LIVER_DRAFT_REPLY)]).drafts,
            refining_gateway("Q: Was a TIPS procedure performed? "
                             "[Intervention/DirectMatch]\nRULE: Q1 IS YES"),
            liver_criterion(),
        )
        question = merged.questions[0]
        assert question.category is Category.INTERVENTION
        assert question.task_type is TaskType.DIRECT_MATCH

    def test_default_labels_applied(self):
        merged = merge_question_sets(
            generate_questions(liver_criterion(),
                               [drafting_gateway(LIVER_DRAFT_REPLY)]).drafts,
            refining_gateway("Q: Unlabeled question?\nRULE: Q1 IS YES"),
            liver_criterion(),
        )
        assert merged.questions[0].category is Category.DIAGNOSIS
        assert merged.questions[0].task_type is TaskType.CLASSIFICATION


def test_convert_criterion_end_to_end():
    criterion = liver_criterion()
    merged, updated, warnings = convert_criterion(
        criterion,
        [drafting_gateway(LIVER_DRAFT_REPLY)],
        refining_gateway(LIVER_DRAFT_REPLY),
    )
    assert updated.question_ids == ("C1.q1", "C1.q2", "C1.q3", "C1.q4")
    assert updated.rule_text == merged.rule_text
    assert updated.needs_human_rule is False


def test_conversion_reproducible_given_fixed_fixtures():
    def run():
        merged, updated, _ = convert_criterion(
            liver_criterion(),
            [drafting_gateway(LIVER_DRAFT_REPLY)],
            refining_gateway(LIVER_DRAFT_REPLY),
        )
        return [question.to_dict() for question in merged.questions], updated.to_dict()

    assert run() == run()
