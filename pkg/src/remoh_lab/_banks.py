"""Question and answer banks for the four QA categories.

Existence banks are row-aligned: question ``i`` pairs with answer ``i``.
``<sks>`` / ``<sks1>`` / ``<sks2>`` are bound to concept names at emission.
"""

EXISTENCE_QUESTIONS = (
    'Is there any trace of <sks> in this footage?',
    'Can you detect <sks> in this video clip?',
    'Does <sks> show up anywhere in this recording?',
    'Is <sks> visible in this video?',
    'Could you verify if <sks> is here?',
    'Does this footage include <sks>?',
    'Can you spot <sks> in this clip?',
    'Is <sks> present in this video?',
    'Does <sks> appear in this footage?',
    'Can you tell if <sks> is shown here?',
    'Is <sks> in this video segment?',
    "Can you confirm <sks>'s presence?",
    'Does this clip contain <sks>?',
    'Is <sks> featured in this recording?',
    'Can you find <sks> in this video?',
    'Is <sks> shown in any frame?',
    'Does this video show <sks>?',
    'Is <sks> visible anywhere?',
    'Can you see <sks>?',
    'Is <sks> in this video?',
    'Can you recognize <sks>?',
    'Does <sks> appear at all?',
    'Is <sks> recorded here?',
    'Can you identify <sks>?',
    'Is <sks> present?',
)

EXISTENCE_YES = (
    'Yes, <sks> is in this video.',
    'I can confirm that <sks> appears.',
    '<sks> is present in this recording.',
    'The video contains <sks>.',
    "I've identified <sks>.",
    '<sks> is shown in this video.',
    'Yes, <sks> appears here.',
    'I can verify that <sks> is present.',
    'The footage shows <sks>.',
    '<sks> is in this video clip.',
    "I've detected <sks>.",
    'Yes, <sks> is featured.',
    'The video includes <sks>.',
    'I can see <sks>.',
    '<sks> is definitely here.',
    "Yes, I've found <sks>.",
    'This video shows <sks>.',
    '<sks> is visible.',
    'Yes, <sks> has been captured.',
    'The video clearly shows <sks>.',
    "I've spotted <sks>.",
    '<sks> appears in this video.',
    'Yes, this footage contains <sks>.',
    'I can recognize <sks>.',
    '<sks> is clearly visible.',
)

EXISTENCE_NO = (
    'No, <sks> is not in this video.',
    'I cannot detect <sks>.',
    'This video does not contain <sks>.',
    '<sks> is not shown.',
    'There is no sign of <sks>.',
    '<sks> does not appear.',
    'I can confirm <sks> is not here.',
    'The footage does not include <sks>.',
    "There's no evidence of <sks>.",
    '<sks> is not in this video.',
    "I've checked, <sks> is not present.",
    'This video does not show <sks>.',
    'I see no sign of <sks>.',
    '<sks> is absent.',
    'The video does not show <sks>.',
    'I cannot find <sks>.',
    '<sks> is not visible.',
    'I can verify <sks> is not here.',
    'The video has no <sks>.',
    '<sks> does not exist in this video.',
    'I find no trace of <sks>.',
    'This clip does not contain <sks>.',
    '<sks> is not present.',
    'I cannot identify <sks>.',
    'There is no <sks> here.',
)

PAIR_QUESTIONS = (
    'Is there any trace of <sks1> or <sks2> in this footage?',
    'Can you detect <sks1> or <sks2> in this video clip?',
    'Do <sks1> or <sks2> show up anywhere in this recording?',
    'Are <sks1> or <sks2> visible in this video?',
    'Could you verify if <sks1> or <sks2> are here?',
    'Does this footage include <sks1> or <sks2>?',
    'Can you spot <sks1> or <sks2> in this clip?',
    'Are <sks1> or <sks2> present in this video?',
    'Do <sks1> or <sks2> appear in this footage?',
    'Can you tell if <sks1> or <sks2> are shown here?',
    'Are <sks1> or <sks2> in this video segment?',
    "Can you confirm <sks1> or <sks2>'s presence?",
    'Does this clip contain <sks1> or <sks2>?',
    'Are <sks1> or <sks2> featured in this recording?',
    'Can you find <sks1> or <sks2> in this video?',
    'Are <sks1> or <sks2> shown in any frame?',
    'Does this video show <sks1> or <sks2>?',
    'Are <sks1> or <sks2> visible anywhere?',
    'Can you see <sks1> or <sks2>?',
    'Are <sks1> or <sks2> in this video?',
    'Can you recognize <sks1> or <sks2>?',
    'Do <sks1> or <sks2> appear at all?',
    'Are <sks1> or <sks2> recorded here?',
    'Can you identify <sks1> or <sks2>?',
    'Are <sks1> or <sks2> present?',
)

PAIR_BOTH_YES = (
    'Both <sks1> and <sks2> are present in this video.',
    'I can detect both <sks1> and <sks2> in the footage.',
    'The video shows both <sks1> and <sks2> clearly.',
    '<sks1> and <sks2> are both visible in this recording.',
    "I've identified both <sks1> and <sks2> in the clip.",
    'Both <sks1> and <sks2> appear in this video.',
    'The footage contains both <sks1> and <sks2>.',
    'I can see both <sks1> and <sks2> in frame.',
    '<sks1> and <sks2> are both featured in this video.',
    'The recording shows both <sks1> and <sks2> present.',
    "I've spotted both <sks1> and <sks2> in the footage.",
    'Both <sks1> and <sks2> are captured in this clip.',
    'The video includes both <sks1> and <sks2>.',
    'I can confirm the presence of both <sks1> and <sks2>.',
    '<sks1> and <sks2> are both shown in the recording.',
    'Both figures, <sks1> and <sks2>, are visible.',
    "I've found both <sks1> and <sks2> in the video.",
    'The footage displays both <sks1> and <sks2>.',
    'Both <sks1> and <sks2> are identifiable here.',
    'I can recognize both <sks1> and <sks2>.',
    '<sks1> and <sks2> both appear in this recording.',
    'The video features both <sks1> and <sks2>.',
    'Both <sks1> and <sks2> are clearly visible.',
    "I've detected the presence of both <sks1> and <sks2>.",
    'The clip shows both <sks1> and <sks2>.',
)

# first subject present, second absent; rows align with PAIR_QUESTIONS[:15]
PAIR_MIXED = (
    'I can confirm that <sks1> appears, but <sks2> is not present.',
    "The video shows <sks1>, though there's no sign of <sks2>.",
    '<sks1> is visible, but <sks2> is absent.',
    "I've detected <sks1>, while <sks2> does not appear.",
    'The video contains <sks1>, but <sks2> is not shown.',
    '<sks1> is present, however <sks2> is not in this clip.',
    "I can see <sks1>, but there's no trace of <sks2>.",
    'The footage includes <sks1>, though <sks2> is not visible.',
    '<sks1> appears, but <sks2> is not featured.',
    "I've spotted <sks1>, while <sks2> is nowhere to be seen.",
    '<sks1> is clearly visible, but <sks2> is not.',
    'The recording shows <sks1>, though <sks2> is absent.',
    "I can identify <sks1>, but <sks2> doesn't appear.",
    '<sks1> is present, while <sks2> is not.',
    "The clip features <sks1>, but there's no sign of <sks2>.",
)

PAIR_BOTH_NO = (
    'Neither <sks1> nor <sks2> appear in this video.',
    'I cannot detect either <sks1> or <sks2>.',
    'The video contains neither <sks1> nor <sks2>.',
    'Both <sks1> and <sks2> are absent.',
    'There is no sign of either <sks1> or <sks2>.',
    'Neither <sks1> nor <sks2> are shown.',
    'I confirm both <sks1> and <sks2> are not present.',
    'The footage does not include <sks1> or <sks2>.',
    "There's no evidence of either <sks1> or <sks2>.",
    'Neither <sks1> nor <sks2> are visible.',
    "I've checked, both <sks1> and <sks2> are absent.",
    'This video shows neither <sks1> nor <sks2>.',
    'I see no sign of <sks1> or <sks2>.',
    'Both <sks1> and <sks2> are not in the recording.',
    'The video does not contain <sks1> or <sks2>.',
)

# rows 1-5 action, 6-10 appearance, 11-16 location; row 12 repeats row 8 verbatim
DESCRIPTIVE_QUESTIONS = (
    'What activity is <sks> engaged in during this video?',
    'Could you describe what <sks> is doing in this footage?',
    'What specific actions can you observe <sks> performing in this recording?',
    'What movements or actions does <sks> perform here?',
    "Can you describe <sks>'s behavior in this sequence?",
    'What is <sks> wearing in this video?',
    "Could you describe <sks>'s outfit in this footage?",
    'What color and style of clothing is <sks> dressed in?',
    "How would you describe <sks>'s appearance and attire?",
    "What notable features can you see in <sks>'s clothing?",
    'Where is <sks> positioned in this video?',
    'What color and style of clothing is <sks> dressed in?',
    "Can you describe <sks>'s location relative to others?",
    'Which part of the scene does <sks> appear in?',
    "How does <sks>'s position change throughout the video?",
    'Where can <sks> be found in this footage?',
)
