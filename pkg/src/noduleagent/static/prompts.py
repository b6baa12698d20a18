"""noduleagent/static/prompts.py.

Prompt templates for every backend role.  Templates are `str.format`
patterns; their wording is part of the request hash, so edits change the
fixture keys of scripted backends.
"""

MEDPROMPT = (
    "You are an experienced thoracic radiologist. The images show a lung nodule "
    "on {slice_phrase}; each focal crop is paired with the full axial slice and "
    "the nodule mask. Describe only the annotated region. The measured long "
    "diameter is {long_mm:.1f} mm, the short diameter is {short_mm:.1f} mm and the "
    "height is {height_mm:.1f} mm. Cover the lobe location, the density, the "
    "margin, the shape, and the presence or absence of vacuoles or cavities. Use a "
    "formal radiological tone, do not speculate beyond the image, and write one "
    "concise paragraph of 3-6 sentences."
)
"""Region-specific describe prompt."""

JUDGE_PROMPT = (
    "You are a radiologist reviewing a candidate lung nodule on axial slice "
    "{z_index}. The candidate is outlined in the image and supplied as a mask "
    "covering {area} pixels. Decide whether the outlined region is a true lung "
    "nodule. Answer with an Opinion (+1 for a nodule, -1 otherwise) along with a "
    "Confidence between 0 and 1."
)

RETRIEVAL_PROMPT = (
    "Using the pathology knowledge summaries below, explain what the diagnostic "
    "keywords of this CT report indicate about malignancy.\n"
    "Keywords: {keywords}\n"
    "Summaries:\n{summaries}"
)

AGENT_PROMPT = (
    "You are a {persona} taking part in a multidisciplinary discussion about one "
    "lung nodule. Grade its malignancy using exactly one of: {grades}.\n"
    "Nodule size: long {long_mm:.1f} mm, short {short_mm:.1f} mm, height "
    "{height_mm:.1f} mm.\n"
    "CT report: {report}\n"
    "Pathology knowledge: {knowledge}\n"
    "Historical context: {history}\n"
    "Give a grade, a confidence between 0 and 1, a short rationale, and the "
    "knowledge community ids you relied on."
)

REVISE_PROMPT = (
    "Round {round} of the discussion. Your previous opinion was: {own}.\n"
    "Your colleagues concluded:\n{peers}\n"
    "Summary of the previous round: {summary}\n"
    "Reconsider the evidence and give your revised grade, confidence, rationale "
    "and citations."
)

ROUND_SUMMARY_PROMPT = (
    "Consolidate the following {count} opinions from round {round} into a "
    "cohesive summary, stating the grade tally first.\n{opinions}"
)

COMMUNITY_PROMPT = (
    "Summarize what the following related pathology terms have in common, using "
    "the supporting sentences.\nTerms: {terms}\nSentences:\n{sentences}"
)

EXTRACT_PROMPT = (
    "List the pathology entities in the sentence below, and every pair of "
    "entities it relates.\nSentence {sentence_id}: {text}"
)

MEMORY_RECALL_PROMPT = (
    "Decide whether historical context is necessary for this case. Prior records "
    "matching the report keywords:\n{records}"
)

DLC_JUDGE_PROMPT = (
    "Read the CT report and answer the question with yes or no only.\n"
    "Report: {report}\nQuestion: {question}"
)

LLM_SCORE_PROMPT = (
    "Rate the CT report below on fluency, relevance, consistency and rationality, "
    "each as a number between 0 and 1.\nReport: {report}"
)
